"""Wizard-of-Oz pilot study harness: streaming, annotation, sync, analysis."""

__version__ = "0.1.0"
