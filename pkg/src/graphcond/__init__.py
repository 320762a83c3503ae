"""Graph condensation by gradient matching (GCond, MGCond, EXGC) with coreset baselines."""

__version__ = "0.1.0"
