"""Volumetric segmentation engine.

Dense 3D fully-convolutional encoder-decoder networks on numpy arrays,
with every backward pass written by hand and checked against finite
differences.  Images are channels-first float arrays of shape
(channels, depth, height, width); label volumes are integer arrays of
shape (depth, height, width).
"""

__version__ = "0.1.0"
