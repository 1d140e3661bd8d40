"""Numerical toolkit for thin-neck resonators: spectra, resonances, nodal sets, waves."""

__version__ = "0.1.0"
