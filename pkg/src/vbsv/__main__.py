import sys

from vbsv.cli import main

sys.exit(main())
