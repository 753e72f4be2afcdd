"""Tri-matrix low-rank adaptation (TLoRA) lab with a LoRA baseline on a toy encoder."""

__version__ = "0.1.0"
