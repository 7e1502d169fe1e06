"""reslink: a residual convolutional classifier with area-attention gating.

The package is organised as a small set of numpy-backed building blocks
(`tensor`, `layers`, `attention`), a model assembly (`model`, `checkpoint`),
training machinery (`optim`), a data pipeline (`data`), evaluation metrics
(`metrics`), a finite-difference verification suite (`gradcheck`) and a
command line front end (`cli`).

Submodules are imported lazily by the CLI so that thread-count environment
variables can be set before numpy loads its BLAS backend.
"""

__version__ = "0.1.0"
