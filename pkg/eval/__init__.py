# Evaluation package: ablation and fusion sweeps
