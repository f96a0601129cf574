"""Multi-domain multilingual NMT on synthetic data with a numpy autodiff core."""

__version__ = "0.1.0"
