"""Unlearnable examples: crafting, grayscale/BDR/mixup/AT exploiters, evaluation."""

__version__ = "0.1.0"
