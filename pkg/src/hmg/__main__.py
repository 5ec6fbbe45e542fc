import sys

from hmg.cli import main

sys.exit(main())
