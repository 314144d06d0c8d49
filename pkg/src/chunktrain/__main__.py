import sys

from chunktrain.cli import main

sys.exit(main())
