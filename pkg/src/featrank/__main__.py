import sys

from featrank.cli import main

sys.exit(main())
