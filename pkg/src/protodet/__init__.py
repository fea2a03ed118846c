"""protodet: a desk-scale laboratory for hierarchical prototype learning
in multi-scale object detection."""

__version__ = "0.1.0"
