"""Object-level SLAM with ellipsoid landmarks and commonsense priors."""

__version__ = "0.1.0"
