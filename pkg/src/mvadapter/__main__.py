import sys

from mvadapter.cli import main

sys.exit(main())
