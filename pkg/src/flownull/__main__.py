import sys

from flownull.cli import main

sys.exit(main())
