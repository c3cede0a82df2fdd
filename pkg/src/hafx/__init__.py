"""hafx: a desk-scale lab for hybrid linear/sliding-window attention
conversion of toy transformers, with component-collapse diagnostics."""

__version__ = "0.1.0"
