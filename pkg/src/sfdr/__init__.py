"""Desk-scale remote-sensing image captioner.

Fuses joint image-text embeddings with grid features, refines them through a
dynamically weighted feature graph, and decodes captions with a transformer,
all over pre-extracted feature bundles.
"""

__version__ = "0.1.0"
