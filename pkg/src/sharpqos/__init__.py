"""Joint QoS prediction with hyperbolic graph encoders and sparse task routing."""
__version__ = "0.1.0"
