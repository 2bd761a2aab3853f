"""Parameter-efficient transfer learning for a small AST-style encoder."""

__version__ = "0.1.0"
