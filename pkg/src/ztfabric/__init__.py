"""Zero-trust messaging fabric for multi-agent pipelines."""

__version__ = "0.1.0"
