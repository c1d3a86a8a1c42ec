"""Object-centric visual token pruning guided by predicted global attention."""

__version__ = "0.1.0"
