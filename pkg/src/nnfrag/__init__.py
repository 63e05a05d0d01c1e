"""Robustness of saliency maps and influence rankings under small input perturbations."""

__version__ = "0.1.0"
