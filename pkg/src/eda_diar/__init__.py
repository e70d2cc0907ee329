"""Desk-scale end-to-end speaker diarization with attractor-based speaker
counting: synthetic corpus simulation, training, inference, and scoring."""

__version__ = "0.1.0"
