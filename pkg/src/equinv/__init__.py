"""Invariant contrastive pretraining and equivariant projection for landmark representations."""
__version__ = "0.1.0"
