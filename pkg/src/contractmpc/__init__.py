"""Hierarchical MPC with slack-value feasibility contracts."""
__version__ = "0.1.0"
