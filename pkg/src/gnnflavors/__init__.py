"""Convolutional, attentional and message-passing GNN layers on a small numpy autodiff engine.

Submodules: ``tensorgrad`` (tape autodiff, Adam, checkpoints), ``graphs``,
``layers``, ``backbone`` (WaveNet-style forecaster), ``rmsg`` (synthetic
benchmark), ``traffic`` (speed forecasting pipeline), ``checks`` and ``cli``.
"""

__version__ = "0.1.0"
