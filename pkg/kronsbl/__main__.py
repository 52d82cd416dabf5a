import sys

from kronsbl.cli import main

sys.exit(main())
