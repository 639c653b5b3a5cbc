"""matk: metric attacks and defenses for retrieval embedders."""
__version__ = "0.1.0"
