""" Entry point for ``python -m deep_fext`` """
import sys

from deep_fext.main import main

sys.exit(main())
