"""Run configuration and experiment directory helpers."""
