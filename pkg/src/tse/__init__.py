"""Speaker-conditioned target speaker extraction with a customized LSTM
forget gate, built on a small reverse-mode autodiff engine."""

from . import autodiff, cells, data, dsp, losses, networks, train

__all__ = ["autodiff", "cells", "data", "dsp", "losses", "networks", "train"]
__version__ = "0.1.0"
