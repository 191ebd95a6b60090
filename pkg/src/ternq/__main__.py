import sys

from ternq.cli import main

sys.exit(main())
