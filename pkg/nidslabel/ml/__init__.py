"""
Supervised labeling pipeline: TF-IDF features and one-vs-rest classifiers.
"""

from nidslabel.ml import classifiers, features

__all__ = ["features", "classifiers"]
