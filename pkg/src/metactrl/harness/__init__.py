"""Experiment orchestration and command-line entry point."""
