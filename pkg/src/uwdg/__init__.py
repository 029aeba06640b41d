"""Synthetic underwater domain generalization toolkit: image formation model,
bilateral-grid stylizer, alignment losses, feature-level domain mixup and a
small numpy training harness."""

__version__ = "0.1.0"
