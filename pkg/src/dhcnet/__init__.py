"""Divide-and-conquer holistic cue training on a from-scratch autodiff engine."""

__version__ = "0.1.0"
