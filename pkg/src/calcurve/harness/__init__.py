"""Experiment runner, logs, statistics and the command line."""
