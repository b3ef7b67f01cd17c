"""
SketchForge
Face sketch synthesis from photos, driven by pseudo sketch features.

    python app.py train --config run.cfg
"""

import sys

from sketchforge.cli import main

if __name__ == "__main__":
    sys.exit(main())
