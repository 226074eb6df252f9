"""Blockchain-coordinated asynchronous federated learning for mobile edge networks."""

__version__ = "0.1.0"
