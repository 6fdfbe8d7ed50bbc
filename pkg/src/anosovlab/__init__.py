"""anosovlab: numerical laboratory for explicit hyperbolic flows."""

__version__ = "0.1.0"
