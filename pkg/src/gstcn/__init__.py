"""Scene-level vehicle trajectory forecasting: graph convolution, a time-as-channels CNN and a GRU decoder."""

__version__ = "0.1.0"
