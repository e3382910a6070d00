"""Covert geo-location (hideout) detection at desk scale.

Binary segmentation of image regions behind which something could hide,
trained with depth-derived pseudo labels, an auxiliary depth-aware decoder
and two self-supervised feature losses.
"""

__version__ = "0.1.0"
