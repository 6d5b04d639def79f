"""Geometrically regularized autoencoders on small dense networks.

Subpackages are imported directly (``confae.net``, ``confae.regularizers``,
``confae.geometry``, ...). The top-level package is kept import-light so the
CLI can pin BLAS thread counts before numpy loads.
"""

__version__ = "0.1.0"
