"""Desk-scale cross-domain retrieval laboratory.

A procedurally generated two-domain benchmark with an exact translation
oracle, a small differentiable encoder, contrastive training objectives,
bidirectional retrieval metrics, and an experiment CLI.
"""

__version__ = "0.1.0"
