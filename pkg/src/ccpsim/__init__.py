"""Monte Carlo simulation of a network of central counterparties and their clearing members."""

__version__ = "0.1.0"
