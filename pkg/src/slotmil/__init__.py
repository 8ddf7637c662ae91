"""Slot-attention MIL: bag classification with subsampling and slot-level mixup."""

__version__ = "0.1.0"
