"""Budget-constrained batch multi-fidelity active learning."""

__version__ = "0.1.0"
