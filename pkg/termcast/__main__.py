import sys

from termcast.main import main

sys.exit(main())
