"""Attentive crowd-flow forecasting on grid data, built on a small numpy autodiff core."""

__version__ = "0.1.0"
