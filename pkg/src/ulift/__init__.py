"""Lifting view-inconsistent 2D instance masks onto frozen Gaussian splats.

Per-Gaussian features and an object codebook are trained jointly so that each
pixel's rendered feature selects one codebook row; segmentation is then a
single argmax, with no clustering step.
"""

__version__ = "0.1.0"
