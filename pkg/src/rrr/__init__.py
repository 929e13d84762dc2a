"""Continual learning with explanation replay: saliency maps stored next to
replayed samples and kept consistent while new classes are learned."""

__version__ = "0.1.0"
