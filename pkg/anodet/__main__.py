import sys

from anodet.cli import main

sys.exit(main())
