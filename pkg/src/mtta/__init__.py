"""Online test-time adaptation of a 3D skeletal pose estimator with a discretized motion prior."""

__version__ = "0.1.0"
