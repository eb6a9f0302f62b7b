"""Self-supervised monocular depth for indoor scenes.

Depth factorization into relative depth and a regressed global scale,
residual pose refinement through repeated view synthesis, and coordinate
channels for the pose network, with a procedural renderer for test data.
"""

__version__ = "0.1.0"
