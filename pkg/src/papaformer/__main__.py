import sys

from papaformer.cli import main

sys.exit(main())
