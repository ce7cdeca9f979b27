import sys

from liverseg.runner.cli import main

sys.exit(main())
