"""Low-rank covariance propagation with Krylov model order reduction for
plate-cavity systems under random wall-pressure loading."""

__version__ = "0.1.0"
