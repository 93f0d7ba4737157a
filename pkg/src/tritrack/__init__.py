"""Full-frame single-object tracker with multi-scale template pooling,
context-embedded classification, and a self-contained training/eval kit."""

__version__ = "0.1.0"
