"""Alert prioritisation for street outreach: synthetic corpus, features, ranking models."""

__version__ = "0.1.0"
