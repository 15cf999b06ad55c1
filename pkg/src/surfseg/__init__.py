"""Simultaneous multi-surface segmentation of layered volumes.

A from-scratch numpy CNN regresses the surface positions of the middle
columns of full-height patches; an exact dynamic program with convex
smoothness priors serves as the classical baseline.
"""
__version__ = "0.1.0"
