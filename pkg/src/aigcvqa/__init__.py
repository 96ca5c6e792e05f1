"""No-reference quality assessment for AI-generated video."""

__version__ = "0.1.0"
