import sys

from essa.cli import main

sys.exit(main())
