"""Experiment driver: configuration, data, training, checkpoints, verification."""
