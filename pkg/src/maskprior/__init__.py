"""Static-mask priors for distractor-free sparse-view 3D Gaussian Splatting.

The pipeline consumes per-scene dumps (images, cameras, depth, entity masks,
cross-view attention tensors) and produces per-image static-mask priors, a
warm-up mask scheduler, a point-cloud filter, depth alignment utilities, and
an evaluation harness.
"""

__version__ = "0.1.0"
