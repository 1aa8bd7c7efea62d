"""Dynamic multi-valued mapping: a generator conditioned on a learned codebook,
with a fixed equiangular-frame head giving one probability per code."""

__version__ = "0.1.0"
