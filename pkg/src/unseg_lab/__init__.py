"""Desk-scale unlearnable examples for promptable segmentation."""

__version__ = "0.1.0"
