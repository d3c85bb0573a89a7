"""Teacher-student channel consistency analysis and knowledge consistent distillation."""

__version__ = "0.1.0"
