"""Multi-fidelity uncertainty quantification for kinetic equations."""

__version__ = "0.1.0"
