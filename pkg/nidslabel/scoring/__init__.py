"""
Baseline predictors and micro-averaged evaluation.
"""

from nidslabel.scoring import baselines, evaluation

__all__ = ["baselines", "evaluation"]
