"""Toolkit for discovering interpretable modulation signals in audio by
gradient-descent sound matching through a differentiable wavetable synth."""

from . import curves, diffkit, lls, losses, metrics, modsig, synth

__all__ = ["curves", "diffkit", "lls", "losses", "metrics", "modsig", "synth"]
