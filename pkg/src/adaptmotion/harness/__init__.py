"""Synthetic data, corpus files, training, the Concat baseline and the CLI."""
