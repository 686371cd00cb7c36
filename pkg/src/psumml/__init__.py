"""Partially supervised unpaired two-modality segmentation on synthetic phantoms."""

__version__ = "0.1.0"
