"""Hierarchical object-and-point visual odometry and mapping.

Object landmarks are constrained dual quadrics observed as image ellipses;
association and the object residual use Wasserstein distances between the
ellipses' Gaussian forms. Points carry the metric accuracy; objects carry
the robustness. A deterministic simulator and CLI drive end-to-end runs.
"""

__version__ = "0.1.0"
