"""Spectral feature learning for nonparametric instrumental-variable regression.

Features for two-stage least squares are learned with a contrastive spectral
loss; the augmented variant adds an outcome-dependent column to the operator
so that the learned subspace tilts toward the structural function.
"""

__version__ = "0.1.0"
