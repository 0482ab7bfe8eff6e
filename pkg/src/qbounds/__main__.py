import sys

from qbounds.harness.cli import main

sys.exit(main())
