"""Knowledge-graph transformer with structure-biased attention, trained from scratch on numpy."""

__version__ = "0.1.0"
