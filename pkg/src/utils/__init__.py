"""
Utility modules for the fluoroscope calibration toolkit
"""
