"""
Main entry point for mfjump module
"""

import sys

from .cli import main

if __name__ == "__main__":
    sys.exit(main())
