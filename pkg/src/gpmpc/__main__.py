import sys

from gpmpc.cli import main

sys.exit(main())
