import sys

from streamssm.cli import main

sys.exit(main())
