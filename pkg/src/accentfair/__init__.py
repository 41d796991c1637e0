"""Group-fair training objectives and fairness metrics on a toy frame-synchronous ASR model."""

__version__ = "0.1.0"
