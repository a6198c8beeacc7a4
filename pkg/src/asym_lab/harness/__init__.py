"""Data, training, probing, case studies and the command-line entry point."""
