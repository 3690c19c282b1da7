"""Mixture of expert/imitator networks (semi-supervised text classification)."""
