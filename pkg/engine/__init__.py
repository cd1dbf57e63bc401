"""
SkullEngine: coarse-to-fine skull segmentation and landmark detection.
"""

__version__ = '0.3.0'
