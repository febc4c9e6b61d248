"""Task-aligned user profile generation and LLM user-simulation evaluation."""

__version__ = "0.1.0"
