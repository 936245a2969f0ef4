"""Non-exemplar class-incremental learning with retrospective feature synthesis."""

__version__ = "0.1.0"
