"""Contrastive transformer-CNN despeckling for ultrasound images."""

__version__ = "0.1.0"
