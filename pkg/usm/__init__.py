"""
usm - uncertainty-aware shape and pose mapping for unknown objects.

Reconstructs a dense SDF shape, a 9-DoF pose and diagonal Gaussian
uncertainties for an object observed in multi-view depth and mask frames,
by jointly optimising a latent shape code and the pose under two
probabilistic energy-score losses.
"""

__version__ = "0.3.0"
__license__ = "MIT"
