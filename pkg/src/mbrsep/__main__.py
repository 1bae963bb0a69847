import sys

from .harness_cli.cli import main

sys.exit(main())
