"""Desk-scale BERT/ELECTRA pretraining with evaluation-driven checkpoint selection."""

__version__ = "0.1.0"
