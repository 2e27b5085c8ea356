"""Experiment runner, reports and CLI."""
