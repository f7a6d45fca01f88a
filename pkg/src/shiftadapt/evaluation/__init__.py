"""Metrics and the nested cross-validation harness."""
from .metrics import UndefinedMetricError, auc, dpd, eod, mae, paired_significance, pearson, score
