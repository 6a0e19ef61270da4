"""Segmentation-guided multi-modal 3D registration."""
