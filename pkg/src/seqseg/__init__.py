"""CNN-RNN slice-sequence segmentation built on a small float64 autograd."""

__version__ = "0.1.0"
