"""Post-processing of DP-KMEANS traces by MCMC dataset simulation."""

__version__ = "0.1.0"
