import sys

from fvp.cli import main

sys.exit(main())
