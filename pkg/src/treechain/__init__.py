"""Tree-indexed Markov chains and the law of large numbers for their empirical measures."""

__version__ = "0.1.0"
