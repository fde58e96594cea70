"""Moment-based recovery of two-layer nets and the RL learners built on it."""

from __future__ import annotations

__version__ = "0.1.0"
