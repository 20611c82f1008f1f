"""ViT teacher/student hashing with hierarchical distillation for image retrieval."""

__version__ = "0.1.0"
