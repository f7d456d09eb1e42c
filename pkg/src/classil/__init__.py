"""Class-incremental learning with separate/combined softmax losses, exemplar replay and distillation."""

__version__ = "0.1.0"
