"""Experiment harness: configuration, stages and the run orchestrator."""
