"""Desk-scale hardware-in-the-loop driving simulator and test harness."""
from __future__ import annotations

__version__ = "0.1.0"
