import sys

from lfmflow.cli import main

sys.exit(main())
