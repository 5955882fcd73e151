"""Medical question-similarity toolkit: intermediate-task dataset
construction, two-stage fine-tuning of a small pair classifier, the
multi-split evaluation protocol, and an FAQ-matching service."""

__version__ = "0.1.0"

from . import corpus, encoder, evaluation, faqmatch, model, taskgen  # noqa: F401
