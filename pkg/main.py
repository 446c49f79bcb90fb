#!/usr/bin/env python3
"""
Main entry point for liftmesh when run from a source checkout.

Equivalent to the installed ``liftmesh`` console script.
"""

import os
import sys

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "src"))

from liftmesh.cli import main

if __name__ == "__main__":
    main()
