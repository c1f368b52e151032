"""Semi-supervised audio tagging toolkit.

Four SSL methods (Mean Teacher, Deep Co-Training, MixMatch, FixMatch),
each with an optional mixup variant, trained on log-Mel spectrograms
through a small self-contained differentiable engine.
"""

__version__ = "0.1.0"
