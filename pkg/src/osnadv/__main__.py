import sys

from osnadv.cli import main

sys.exit(main())
