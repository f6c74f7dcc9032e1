"""
3D token representation layer for small vision Transformers.
"""

__version__ = "0.1.0"
