import sys

from plmfusion.cli import main

sys.exit(main())
