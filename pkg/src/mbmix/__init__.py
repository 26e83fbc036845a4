"""Model-based policy optimization with trajectory-length mixing and
Sobolev-trained dynamics models, on a self-contained float64 autodiff tape."""

__version__ = "0.1.0"
