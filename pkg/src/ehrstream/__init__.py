"""Event-stream EHR sequence modelling: tokenization, sequence properties,
n-gram language models, perplexity curves and evaluation protocols."""

__version__ = "0.1.0"
