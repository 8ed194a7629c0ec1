"""Mask head for frozen DETR-style detectors."""
