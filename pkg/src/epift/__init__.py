"""epift: episode-specific fine-tuning lab for metric-based few-shot audio learners."""

__version__ = "0.1.0"
