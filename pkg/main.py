"""
CMP Density Toolkit

A command-line toolkit for chip-level CMP modeling:
- Volumetric pattern density for HDP and conformal CVD films
- Effective (window-averaged) density maps and post-CMP thickness
- Conventional and smart dummy fill with spacing verification
"""

import sys

from src.cli.main import main


if __name__ == "__main__":
    sys.exit(main())
