"""Weakly- and fully-supervised localization of locally inpainted faces at desk scale."""

__version__ = "0.1.0"
