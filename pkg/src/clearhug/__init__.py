"""Conduction/view sparse masked-autoencoder pretraining and hierarchical lead-group probing for 12-lead ECG."""

__version__ = "0.1.0"
