"""Federated entity classification on relational graphs with basis alignment."""

__version__ = "0.1.0"
