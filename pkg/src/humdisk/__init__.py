"""Control synthesis and Carleman-inequality audits for stochastic
bulk-surface heat equations on the disk."""

__version__ = "0.1.0"
