"""Quality-aware score-level fusion for two-modality biometric verification."""
from .core import DataError, Embedding, FormatError, ScoreTable, SystemScore, TrialRecord

__version__ = "0.1.0"

__all__ = ["DataError", "Embedding", "FormatError", "ScoreTable", "SystemScore", "TrialRecord"]
