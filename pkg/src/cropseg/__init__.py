"""Depth-guided crop segmentation toolkit.

Submodules: raster (image I/O and filters), pseudolabel (depth-to-mask
thresholding), fade (dynamic upsampling operator), selftrain (two-stage
self-training), metrics (mIoU / boundary IoU), corpus (manifest and
screening journal), service (review HTTP API), cli (command line).
"""

__version__ = "0.1.0"
