from .core import (METRIC_NAMES, all_metrics, dice_iou, e_measure, mae, s_measure,
                   weighted_fmeasure)
from .report import COLUMN_TITLES, MetricReport, evaluate_dataset

__all__ = [
    "METRIC_NAMES", "COLUMN_TITLES", "MetricReport", "all_metrics", "dice_iou", "e_measure",
    "evaluate_dataset", "mae", "s_measure", "weighted_fmeasure",
]
