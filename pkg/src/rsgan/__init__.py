"""Adversarial social recommender: a generator of reliable friends and their
items trained against a socially constrained BPR ranker."""

__version__ = "0.1.0"
