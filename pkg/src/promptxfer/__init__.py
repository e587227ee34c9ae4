"""promptxfer: tiny-LM soft prompt tuning, cross-model transfer, and leakage measurement."""

__version__ = "0.1.0"
