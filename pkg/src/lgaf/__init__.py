"""Local/global feature attention fusion for face embeddings on a small numpy autodiff engine."""

__version__ = "0.1.0"
