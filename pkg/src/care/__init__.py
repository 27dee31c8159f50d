"""CARE: contrastive alignment of sequence and image views of ambient-sensor activity."""

__version__ = "0.1.0"
