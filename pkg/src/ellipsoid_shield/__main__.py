import sys

from ellipsoid_shield.cli import main

sys.exit(main())
