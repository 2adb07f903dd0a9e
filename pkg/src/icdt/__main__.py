import sys

from icdt.cli import main

sys.exit(main())
