"""Bounded BSDEs with jumps on finite lattices, exponential utility and indifference valuation."""

__version__ = "0.1.0"
