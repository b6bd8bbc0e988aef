"""Lower- and upper-bound machinery for offline policy evaluation in layered MDPs."""

__version__ = "0.1.0"
