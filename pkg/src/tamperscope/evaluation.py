"""Evaluation harness: pixel-level AUC / AP / F1, image-level F1, dataset
ingestion, and comparison-table reports.

Conventions, stated because results differ across them: AUC uses the rank
statistic with midrank tie correction; AP uses step interpolation over a
descending score sweep with tied scores processed as one block; P-F1
binarizes at score > 0.5; authentic samples are excluded from pixel-metric
averaging (no positive pixels makes AUC/AP undefined) and included in I-F1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .imagetools import MaskImage, load_image, load_mask
from .messages import LABEL_AUTHENTIC, LABEL_TAMPERED

PIXEL_METRICS = ("p_auc", "p_ap", "p_f1")
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


class EvaluationError(ValueError):
    """Misaligned inputs or malformed samples."""


# ---------------------------------------------------------------------------
# Sample types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SampleRef:
    """Index entry for one dataset sample; pixels are decoded lazily."""

    dataset: str
    image_path: str
    mask_path: Optional[str]  # None for authentic samples

    @property
    def gt_label(self) -> str:
        return LABEL_AUTHENTIC if self.mask_path is None else LABEL_TAMPERED


@dataclass(frozen=True)
class EvalSample:
    """One decoded sample: image path, ground truth mask, image-level label."""

    image_path: str
    gt_mask: Optional[MaskImage]
    gt_label: str
    dataset: str = "default"

    def __post_init__(self) -> None:
        if self.gt_label == LABEL_TAMPERED:
            if self.gt_mask is None or self.gt_mask.is_empty:
                raise EvaluationError(
                    f"{self.image_path}: tampered sample needs a mask with >= 1 positive pixel"
                )
        elif self.gt_label == LABEL_AUTHENTIC:
            if self.gt_mask is not None and not self.gt_mask.is_empty:
                raise EvaluationError(
                    f"{self.image_path}: authentic sample cannot have positive mask pixels"
                )
        else:
            raise EvaluationError(f"unknown gt label {self.gt_label!r}")


@dataclass(frozen=True, eq=False)
class ScoredPrediction:
    """Per-pixel scores plus the binary mask and image-level label.

    The binary mask must equal score_map > 0.5 so both metric families
    describe the same prediction.
    """

    score_map: np.ndarray  # (h, w) float64 in [0, 1]
    binary_mask: MaskImage
    image_label: str

    def __post_init__(self) -> None:
        if self.score_map.ndim != 2:
            raise EvaluationError(f"score map must be 2-D, got shape {self.score_map.shape}")
        if self.score_map.shape != self.binary_mask.bits.shape:
            raise EvaluationError(
                f"score map shape {self.score_map.shape} does not match mask "
                f"shape {self.binary_mask.bits.shape}"
            )
        if self.score_map.min(initial=0.0) < 0.0 or self.score_map.max(initial=0.0) > 1.0:
            raise EvaluationError("score map values must lie in [0, 1]")
        if not np.array_equal(self.binary_mask.bits, (self.score_map > 0.5).astype(np.uint8)):
            raise EvaluationError("binary mask must equal score_map thresholded at 0.5")
        if self.image_label not in (LABEL_AUTHENTIC, LABEL_TAMPERED):
            raise EvaluationError(f"unknown image label {self.image_label!r}")


def result_to_prediction(result, dims: tuple[int, int]) -> ScoredPrediction:
    """Bridge a chain result to the metric inputs.

    The pipeline emits binary masks, so the score map is the hard 0/1 map;
    soft score maps from external methods go through ScoredPrediction
    directly.
    """
    width, height = dims
    if result.mask is not None:
        if result.mask.dims != dims:
            raise EvaluationError(
                f"result mask dims {result.mask.dims} do not match image dims {dims}"
            )
        mask = result.mask
    else:
        mask = MaskImage.zeros(width, height)
    return ScoredPrediction(
        score_map=mask.bits.astype(np.float64),
        binary_mask=mask,
        image_label=result.label,
    )


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _flatten_pair(scores: np.ndarray, gt: MaskImage) -> tuple[np.ndarray, np.ndarray]:
    if scores.shape != gt.bits.shape:
        raise EvaluationError(
            f"score shape {scores.shape} does not match gt shape {gt.bits.shape}"
        )
    return scores.ravel().astype(np.float64), gt.bits.ravel().astype(bool)


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with tied values sharing their average rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    n = len(values)
    while i < n:
        j = i
        while j + 1 < n and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def pixel_auc(scores: np.ndarray, gt: MaskImage) -> Optional[float]:
    """ROC-AUC via the rank statistic with midrank tie correction.

    None when the ground truth is degenerate (all-positive or all-negative),
    which the harness reports as a skipped sample.
    """
    flat, labels = _flatten_pair(scores, gt)
    pos = int(labels.sum())
    neg = len(labels) - pos
    if pos == 0 or neg == 0:
        return None
    ranks = _midranks(flat)
    rank_sum = float(ranks[labels].sum())
    return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg)


def pixel_ap(scores: np.ndarray, gt: MaskImage) -> Optional[float]:
    """Average precision: step interpolation over a descending score sweep,
    tied scores processed as one block.  None when gt has no positives."""
    flat, labels = _flatten_pair(scores, gt)
    pos = int(labels.sum())
    if pos == 0:
        return None
    order = np.argsort(-flat, kind="mergesort")
    sorted_scores = flat[order]
    sorted_labels = labels[order].astype(np.float64)
    tp = np.cumsum(sorted_labels)
    fp = np.cumsum(1.0 - sorted_labels)
    block_ends = np.nonzero(np.diff(sorted_scores))[0]
    block_ends = np.append(block_ends, len(sorted_scores) - 1)
    precision = tp[block_ends] / (tp[block_ends] + fp[block_ends])
    recall = tp[block_ends] / pos
    recall_steps = np.diff(np.concatenate(([0.0], recall)))
    return float(np.sum(recall_steps * precision))


def pixel_f1(pred: MaskImage, gt: MaskImage) -> Optional[float]:
    """2TP / (2TP + FP + FN); None (skipped) when pred and gt are both empty."""
    if pred.dims != gt.dims:
        raise EvaluationError(f"pred dims {pred.dims} do not match gt dims {gt.dims}")
    p = pred.bits.astype(bool)
    g = gt.bits.astype(bool)
    tp = int(np.sum(p & g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    denom = 2 * tp + fp + fn
    if denom == 0:
        return None
    return 2.0 * tp / denom


def image_f1(pred_labels: Sequence[str], gt_labels: Sequence[str]) -> float:
    """Binary F1 with tampered as the positive class; 0 when undefined."""
    if len(pred_labels) != len(gt_labels):
        raise EvaluationError(
            f"length mismatch: {len(pred_labels)} predictions vs {len(gt_labels)} labels"
        )
    if not gt_labels:
        raise EvaluationError("image_f1 requires at least one sample")
    tp = sum(
        1
        for p, g in zip(pred_labels, gt_labels)
        if p == LABEL_TAMPERED and g == LABEL_TAMPERED
    )
    fp = sum(
        1
        for p, g in zip(pred_labels, gt_labels)
        if p == LABEL_TAMPERED and g == LABEL_AUTHENTIC
    )
    fn = sum(
        1
        for p, g in zip(pred_labels, gt_labels)
        if p == LABEL_AUTHENTIC and g == LABEL_TAMPERED
    )
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 0.0
    return 2.0 * tp / denom


# ---------------------------------------------------------------------------
# Dataset ingestion
# ---------------------------------------------------------------------------

def _image_files(directory: Path) -> list[Path]:
    return sorted(
        p for p in directory.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS
    )


def index_dataset(root: Path, dataset: Optional[str] = None) -> list[SampleRef]:
    """Index one dataset directory: images/ with masks/ by stem, plus an
    optional authentic/ directory of untampered images."""
    root = Path(root)
    name = dataset or root.name
    refs: list[SampleRef] = []
    images_dir = root / "images"
    masks_dir = root / "masks"
    if images_dir.is_dir():
        for image_path in _image_files(images_dir):
            mask_path = masks_dir / f"{image_path.stem}.png"
            if not mask_path.exists():
                raise EvaluationError(f"{image_path}: no mask at {mask_path}")
            refs.append(SampleRef(name, str(image_path), str(mask_path)))
    authentic_dir = root / "authentic"
    if authentic_dir.is_dir():
        for image_path in _image_files(authentic_dir):
            refs.append(SampleRef(name, str(image_path), None))
    if not refs:
        raise EvaluationError(f"dataset {root} has no samples (expected images/ or authentic/)")
    return refs


def index_dataset_tree(root: Path) -> list[SampleRef]:
    """Index a root of dataset directories; a bare dataset dir also works."""
    root = Path(root)
    if not root.is_dir():
        raise EvaluationError(f"dataset root {root} is not a directory")
    if (root / "images").is_dir() or (root / "authentic").is_dir():
        return index_dataset(root)
    refs: list[SampleRef] = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        if (sub / "images").is_dir() or (sub / "authentic").is_dir():
            refs.extend(index_dataset(sub))
    if not refs:
        raise EvaluationError(f"no datasets found under {root}")
    return refs


def load_sample(ref: SampleRef) -> EvalSample:
    """Decode one indexed sample; raises on unreadable or inconsistent files."""
    image = load_image(ref.image_path)
    mask: Optional[MaskImage] = None
    if ref.mask_path is not None:
        mask = load_mask(ref.mask_path)
        if mask.dims != image.dims:
            raise EvaluationError(
                f"{ref.image_path}: mask dims {mask.dims} do not match image dims {image.dims}"
            )
    return EvalSample(
        image_path=ref.image_path,
        gt_mask=mask,
        gt_label=ref.gt_label,
        dataset=ref.dataset,
    )


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

@dataclass
class Report:
    """Per-sample rows, per-dataset means, and the cross-dataset average."""

    rows: list[dict]
    per_dataset: dict[str, dict[str, Optional[float]]]
    average: dict[str, Optional[float]]
    skipped: list[dict] = field(default_factory=list)
    config_digest: str = ""

    def to_dict(self) -> dict:
        return {
            "config_digest": self.config_digest,
            "per_dataset": self.per_dataset,
            "average": self.average,
            "rows": self.rows,
            "skipped": self.skipped,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_table(self) -> str:
        """Aligned plain-text table in the dataset-columns shape."""
        headers = ["Dataset", "P-AUC", "P-AP", "P-F1", "I-F1", "N"]
        def fmt(value: Optional[float]) -> str:
            return "-" if value is None else f"{value:.3f}"

        lines = []
        names = list(self.per_dataset) + ["Average"]
        stats = {**self.per_dataset, "Average": self.average}
        widths = [max(len(headers[0]), *(len(n) for n in names)), 7, 7, 7, 7, 5]
        header_line = "  ".join(h.ljust(w) for h, w in zip(headers, widths))
        lines.append(header_line)
        lines.append("-" * len(header_line))
        for name in names:
            row = stats[name]
            n = row.get("n")
            cells = [
                name.ljust(widths[0]),
                fmt(row.get("p_auc")).ljust(widths[1]),
                fmt(row.get("p_ap")).ljust(widths[2]),
                fmt(row.get("p_f1")).ljust(widths[3]),
                fmt(row.get("i_f1")).ljust(widths[4]),
                ("-" if n is None else str(int(n))).ljust(widths[5]),
            ]
            lines.append("  ".join(cells))
        return "\n".join(lines) + "\n"


def _mean(values: list[float]) -> Optional[float]:
    return float(np.mean(values)) if values else None


def evaluate_dataset(
    samples: Sequence[EvalSample],
    predictions: Sequence[ScoredPrediction],
    skipped: Optional[list[dict]] = None,
    config_digest: str = "",
) -> Report:
    """Aggregate per-sample metrics into per-dataset means and the unweighted
    cross-dataset average; authentic samples contribute to I-F1 only."""
    if len(samples) != len(predictions):
        raise EvaluationError(
            f"misaligned inputs: {len(samples)} samples vs {len(predictions)} predictions"
        )

    rows: list[dict] = []
    skip_records = list(skipped) if skipped else []
    by_dataset: dict[str, list[tuple[EvalSample, dict]]] = {}
    for sample, pred in zip(samples, predictions):
        row: dict = {
            "dataset": sample.dataset,
            "image": sample.image_path,
            "gt_label": sample.gt_label,
            "pred_label": pred.image_label,
            "p_auc": None,
            "p_ap": None,
            "p_f1": None,
        }
        if sample.gt_label == LABEL_TAMPERED:
            assert sample.gt_mask is not None
            auc = pixel_auc(pred.score_map, sample.gt_mask)
            if auc is None:
                skip_records.append(
                    {
                        "dataset": sample.dataset,
                        "image": sample.image_path,
                        "reason": "degenerate ground truth for AUC (single class)",
                        "metric": "p_auc",
                    }
                )
            row["p_auc"] = auc
            row["p_ap"] = pixel_ap(pred.score_map, sample.gt_mask)
            row["p_f1"] = pixel_f1(pred.binary_mask, sample.gt_mask)
        rows.append(row)
        by_dataset.setdefault(sample.dataset, []).append((sample, row))

    per_dataset: dict[str, dict[str, Optional[float]]] = {}
    for name in sorted(by_dataset):
        entries = by_dataset[name]
        stats: dict[str, Optional[float]] = {}
        for metric in PIXEL_METRICS:
            stats[metric] = _mean([r[metric] for _, r in entries if r[metric] is not None])
        stats["i_f1"] = image_f1(
            [r["pred_label"] for _, r in entries],
            [s.gt_label for s, _ in entries],
        )
        stats["n"] = float(len(entries))
        per_dataset[name] = stats

    average: dict[str, Optional[float]] = {}
    for metric in (*PIXEL_METRICS, "i_f1"):
        average[metric] = _mean(
            [d[metric] for d in per_dataset.values() if d[metric] is not None]
        )
    average["n"] = float(sum(d["n"] or 0 for d in per_dataset.values()))

    return Report(
        rows=rows,
        per_dataset=per_dataset,
        average=average,
        skipped=skip_records,
        config_digest=config_digest,
    )
