"""Smartcard command-sequence probing toolkit.

Simulated ISO 7816 cards, certified straight-line signing programs,
interleaving and mutation machinery, an anomaly-detecting middleware,
and a command-line/daemon front end.
"""

__version__ = "0.1.0"
