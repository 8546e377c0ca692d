import sys

from aolkit.cli import main

sys.exit(main())
