"""Federated domain unlearning: simulation, unlearning methods, representation analysis and verification."""
from __future__ import annotations

__version__ = "0.1.0"
