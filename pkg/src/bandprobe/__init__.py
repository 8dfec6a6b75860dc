"""Permutation importance of spectral bands for a multispectral U-Net."""
