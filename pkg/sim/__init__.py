"""Discrete-event model of far-memory nodes running memory channel controllers."""
