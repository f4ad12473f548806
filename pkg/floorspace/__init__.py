"""
Floorspace - building footprint and height from Sentinel-1/2 composites.
"""

__version__ = "0.1.0"
