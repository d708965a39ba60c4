"""slidecascade: attention-guided patch selection, learned latent compression,
and local-to-global reconstruction for tiled slide images."""

__version__ = "0.1.0"
