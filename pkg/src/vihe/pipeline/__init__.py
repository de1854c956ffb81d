"""Datasets, keyposes, targets, training and staged inference."""
