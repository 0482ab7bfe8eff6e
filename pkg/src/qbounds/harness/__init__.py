"""Experiment configuration, sweeps, metrics, output writers and the command-line interface."""
