"""gliopipe: desk-scale glioma preprocessing, segmentation and grading."""

__version__ = "0.1.0"
