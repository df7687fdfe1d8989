# TERMCast urban flow forecasting package
