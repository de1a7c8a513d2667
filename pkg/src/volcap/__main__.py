import sys

from .capcli import main

sys.exit(main())
