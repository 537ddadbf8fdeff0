"""Self-supervised place recognition on simulated 2D LiDAR.

Temporal pseudo-labels, feature-space expansion and geometric verification
train a small point-set encoder; poses are used only for evaluation.
"""

__version__ = "0.1.0"
