"""Change detection for LLM APIs from first-token logprobs."""

__version__ = "0.1.0"
