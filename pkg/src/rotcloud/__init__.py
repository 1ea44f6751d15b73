"""Rotation-prediction pretraining and transfer evaluation for point clouds."""

__version__ = "0.1.0"
