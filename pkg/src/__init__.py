"""
Fluoroscope self-calibration toolkit

Robust bundle adjustment with a learned, nonparametric image-distortion field
for single and biplanar X-ray fluoroscopes, plus a synthetic bead-phantom
generator and the accuracy benchmark used to assess it.
"""

from .utils.config import VERSION as __version__

__author__ = "Fluoro Calibrate contributors"
__description__ = "Self-calibration of X-ray fluoroscopes from bead-phantom radiographs"
