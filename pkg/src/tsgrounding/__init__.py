"""Temporal sentence grounding with pseudo-query alignment and prompt-guided fusion."""

__version__ = "0.1.0"
