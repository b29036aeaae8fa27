"""Blind video temporal consistency: a recurrent network trained with
perceptual and flow-based temporal losses, plus the matching metrics."""

__version__ = "0.1.0"
