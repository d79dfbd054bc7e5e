import sys

from kinoctl.cli import main

sys.exit(main())
