"""
Entry point for running neuralinterp as a module.

Usage: python -m neuralinterp [command] [options]
"""

import sys

from neuralinterp.cli import main

if __name__ == "__main__":
    sys.exit(main())
