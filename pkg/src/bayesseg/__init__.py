"""Bayesian U-net segmentation with predictive uncertainty and quality control.

Bayes by Backprop, MC dropout and deep ensembles on a numpy autodiff engine,
evaluated on synthetic short-axis cardiac phantoms.
"""

__version__ = "0.1.0"
