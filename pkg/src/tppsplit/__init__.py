"""Marked temporal point processes with disjoint time and mark parametrisations."""
__version__ = "0.1.0"
