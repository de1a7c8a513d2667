"""Avatar-conditioned monocular volumetric capture, desk scale.

Learns a decomposed geometry + texture body avatar from a synthetic scan
corpus, fuses avatar-predicted and observed normal maps through a
rotation-grid Gauss-Newton solve, and reconstructs textured meshes from a
single normal-map observation.
"""

__version__ = "0.1.0"
