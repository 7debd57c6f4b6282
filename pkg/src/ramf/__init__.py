"""Non-exemplar class-incremental learning with class augmentation, mixed features and noisy prototypes."""

__version__ = "0.1.0"
