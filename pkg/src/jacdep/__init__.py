"""Distributed expectation-propagation receiver for grant-free cell-free massive MIMO.

The package covers joint activity detection, channel estimation and data
detection (``jacd_ep``), its pilot-only initializer (``jac_ep``), a genie-aided
LMMSE baseline and a reproducible Monte Carlo harness.
"""

__version__ = "0.1.0"
