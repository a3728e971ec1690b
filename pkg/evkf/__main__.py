"""``python -m evkf``."""

import sys

from .cli import main

sys.exit(main())
