"""Energy-based semi-supervised anomaly detection with prototype scoring."""

__version__ = "0.1.0"
