import sys

from irm.cli import main

sys.exit(main())
