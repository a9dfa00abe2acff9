"""Experiment driver: synthetic weights, toy models, baselines and benchmark suites."""
