"""Goal-specific unlearning on a small transformer: RMU variants, probe-based
toxicity removal, meta-learned loss weighting and the S-unlearning metric."""

__version__ = "0.1.0"
