"""Federated supernet training simulator.

One weight-sharing network trained across simulated non-i.i.d. clients,
with child architectures of elastic depth, width and kernel size, and
metered communication costs.
"""

__version__ = "0.1.0"
