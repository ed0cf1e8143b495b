import sys

from laser.cli import main

sys.exit(main())
