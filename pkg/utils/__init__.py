"""
Expert placement simulator for mixture-of-experts diffusion decoding.
"""

__version__ = "1.0.0"
