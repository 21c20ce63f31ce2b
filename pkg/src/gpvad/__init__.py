"""Weakly supervised voice activity detection: toy corpus, log-Mel features,
CRNN trained from clip- or frame-level labels, double-threshold
post-processing and VAD metrics."""

__version__ = "0.1.0"
