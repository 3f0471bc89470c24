"""Blind-patch denoising network for spatially correlated noise."""
