"""
Test suite for the fluoroscope calibration toolkit
"""
