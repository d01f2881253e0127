"""Mobility-embedded POI representations: preprocessing, pretraining and probing."""

__version__ = "0.1.0"
