"""Multivariate time-series forecasting with a prior-data fitted transformer.

Synthetic multivariate series are drawn from Gaussian processes with random
kernel compositions mixed through a linear model of coregionalization, and a
channel-mixing patch transformer is trained on them to forecast unseen series.
"""

__version__ = "0.1.0"
