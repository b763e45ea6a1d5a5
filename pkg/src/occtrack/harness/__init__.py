"""Synthetic data, dataset I/O, metrics, training helpers and ablations."""
