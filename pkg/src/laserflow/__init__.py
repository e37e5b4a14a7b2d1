"""Multi-sweep range-view detection and motion forecasting with calibrated Laplace uncertainty."""

__version__ = "0.1.0"
