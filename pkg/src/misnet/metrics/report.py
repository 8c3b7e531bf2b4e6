"""Dataset-level metric reports (CSV and markdown)."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..io import list_by_stem, read_mask, read_prob_map
from .core import METRIC_NAMES, all_metrics

COLUMN_TITLES = {
    "mdice": "mDice",
    "miou": "mIoU",
    "wfm": "F_β^ω",
    "sm": "S_m",
    "em": "E_φ^max",
    "mae": "MAE",
}


@dataclass
class MetricReport:
    dataset_id: str
    per_image: list = field(default_factory=list)   # dicts: image + six metrics + empty_gt
    means: dict = field(default_factory=dict)

    def add(self, image_id, values: dict, empty_gt=False):
        self.per_image.append({"image": image_id, **values, "empty_gt": bool(empty_gt)})

    def finalize(self) -> "MetricReport":
        if self.per_image:
            self.means = {k: float(np.mean([row[k] for row in self.per_image])) for k in METRIC_NAMES}
        return self

    @property
    def flagged(self) -> list:
        return [row["image"] for row in self.per_image if row["empty_gt"]]

    def mean_vector(self) -> tuple:
        return tuple(self.means[k] for k in METRIC_NAMES)

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image", *METRIC_NAMES, "empty_gt"])
            for row in self.per_image:
                writer.writerow([row["image"], *(f"{row[k]:.6f}" for k in METRIC_NAMES), int(row["empty_gt"])])
            writer.writerow(["MEAN", *(f"{self.means[k]:.6f}" for k in METRIC_NAMES), len(self.flagged)])
        return path

    @classmethod
    def read_csv(cls, path, dataset_id=None) -> "MetricReport":
        """Load a CSV written by :meth:`write_csv`; the MEAN row is recomputed."""
        path = Path(path)
        report = cls(dataset_id or path.stem)
        with path.open(newline="") as fh:
            for row in csv.DictReader(fh):
                if row["image"] == "MEAN":
                    continue
                report.add(row["image"], {k: float(row[k]) for k in METRIC_NAMES}, row["empty_gt"] == "1")
        if not report.per_image:
            raise ValueError(f"{path} has no per-image rows")
        return report.finalize()

    def to_markdown(self, per_image=False) -> str:
        header = "| Image | " + " | ".join(COLUMN_TITLES[k] for k in METRIC_NAMES) + " |"
        lines = [f"### {self.dataset_id}", "", header, "|" + "---|" * (len(METRIC_NAMES) + 1)]
        rows = self.per_image if per_image else []
        for row in rows:
            lines.append(f"| {row['image']} | " + " | ".join(f"{row[k]:.3f}" for k in METRIC_NAMES) + " |")
        lines.append("| MEAN | " + " | ".join(f"{self.means[k]:.3f}" for k in METRIC_NAMES) + " |")
        if self.flagged:
            lines += ["", f"Images with empty ground truth (F_β^ω reported as 0): {', '.join(self.flagged)}"]
        return "\n".join(lines) + "\n"

    def write_markdown(self, path, per_image=False) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_markdown(per_image))
        return path


def match_stems(pred_dir, gt_dir, stems=None) -> list[tuple[str, Path, Path]]:
    """Pair predictions with masks by file stem; ``stems`` restricts the comparison."""
    preds, gts = list_by_stem(pred_dir), list_by_stem(gt_dir)
    if stems is not None:
        wanted = set(stems)
        missing = sorted(wanted - gts.keys())
        if missing:
            raise ValueError(f"{len(missing)} requested stems have no mask, e.g. {missing[:5]}")
        preds = {k: v for k, v in preds.items() if k in wanted}
        gts = {k: v for k, v in gts.items() if k in wanted}
    common = sorted(preds.keys() & gts.keys())
    if not common:
        raise ValueError(f"no common file stems between {pred_dir} and {gt_dir}")
    unmatched = sorted(preds.keys() ^ gts.keys())
    if unmatched:
        raise ValueError(f"{len(unmatched)} unmatched stems, e.g. {unmatched[:5]}")
    return [(s, preds[s], gts[s]) for s in common]


def evaluate_dataset(pred_dir, gt_dir, dataset_id=None, threshold=0.5, threshold_mode="fixed",
                     e_mode="max", stems=None) -> MetricReport:
    """Score every prediction against its mask; predictions are resized to mask size."""
    report = MetricReport(dataset_id or Path(gt_dir).resolve().parent.name)
    for stem, pred_path, gt_path in match_stems(pred_dir, gt_dir, stems):
        gt = read_mask(gt_path)
        pred = read_prob_map(pred_path, size=gt.shape)
        report.add(stem, all_metrics(pred, gt, threshold, threshold_mode, e_mode), empty_gt=not gt.any())
    return report.finalize()
