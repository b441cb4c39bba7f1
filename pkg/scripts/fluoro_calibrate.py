#!/usr/bin/env python3
"""
🩻 FLUORO CALIBRATE
Robust self-calibration of single and biplanar X-ray fluoroscopes

    python scripts/fluoro_calibrate.py simulate --out runs/demo
    python scripts/fluoro_calibrate.py calibrate --obs runs/demo/observations.csv \
        --init runs/demo/initial.json --train-exposures 45 --out runs/demo
"""

import sys
import os

# Add src directory to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'src'))

from calibration_cli import main

if __name__ == "__main__":
    sys.exit(main())
