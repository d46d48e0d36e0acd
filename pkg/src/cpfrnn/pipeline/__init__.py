"""Data handling, oracles, metrics, persistence and the command line."""
