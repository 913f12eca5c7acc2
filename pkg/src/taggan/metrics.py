"""Percentage of Intersection (PoI), box-level IoU and dataset evaluation."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import BoundingBox, ConfigError, DomainError
from .data import ManifestError, Sample, read_boxes_csv, read_png
from .tagging import ConstraintConfig, extract_boxes, restrict_to_largest, tag_image

POI_FORMULA = "PoI = 100 * |mask AND union(gt_boxes)| / |mask|  (empty mask: 100 if no gt boxes else 0)"
IOU_FORMULA = "IoU = |union(pred_boxes) AND union(gt_boxes)| / |union(pred_boxes) OR union(gt_boxes)|"
REPORT_FIELDS = ["image_id", "mode", "poi", "iou", "n_pred_boxes", "n_gt_boxes"]
MODES = ("equal", "unequal")


def rasterize_boxes(boxes: Sequence[BoundingBox], shape: tuple[int, int]) -> np.ndarray:
    """Pixel union of ``boxes`` (inclusive coordinates) on a frame of ``shape``."""
    h, w = shape
    out = np.zeros((h, w), dtype=bool)
    for b in boxes:
        b = BoundingBox(*b)
        b.validate(h, w)
        out[b.y_min:b.y_max + 1, b.x_min:b.x_max + 1] = True
    return out


def poi(mask: np.ndarray, gt_boxes: Sequence[BoundingBox]) -> float:
    """Percentage of predicted lesion pixels that fall inside the ground-truth boxes."""
    mask = np.asarray(mask) > 0
    inside = rasterize_boxes(gt_boxes, mask.shape)
    n_mask = int(mask.sum())
    if n_mask == 0:
        return 100.0 if len(gt_boxes) == 0 else 0.0
    if len(gt_boxes) == 0:
        return 0.0
    return 100.0 * int(np.count_nonzero(mask & inside)) / n_mask


def iou_boxes(pred: Sequence[BoundingBox], gt: Sequence[BoundingBox], shape: tuple[int, int]) -> float:
    """IoU of the pixel unions of two box sets on a frame of ``shape``."""
    p = rasterize_boxes(pred, shape)
    g = rasterize_boxes(gt, shape)
    union = int(np.count_nonzero(p | g))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(p & g)) / union


@dataclass
class EvalRecord:
    image_id: str
    mode: str
    poi: float
    iou: float
    n_pred_boxes: int
    n_gt_boxes: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.poi <= 100.0 or not 0.0 <= self.iou <= 1.0:
            raise DomainError(f"metric out of range in record for {self.image_id}")


def score_mask(image_id: str, mask: np.ndarray, gt_boxes: Sequence[BoundingBox]) -> list[EvalRecord]:
    """Records for both box modes.

    Equal mode keeps the ``len(gt_boxes)`` largest mask components, both for
    the boxes and for the PoI; unequal mode uses the whole mask.
    """
    k = len(gt_boxes)
    records = []
    for mode in MODES:
        m = restrict_to_largest(mask, k) if mode == "equal" else mask
        boxes = extract_boxes(mask, mode, k)
        records.append(EvalRecord(image_id, mode, poi(m, gt_boxes), iou_boxes(boxes, gt_boxes, mask.shape),
                                  len(boxes), k))
    return records


def score_boxes(image_id: str, pred: Sequence[BoundingBox], gt_boxes: Sequence[BoundingBox],
                shape: tuple[int, int]) -> list[EvalRecord]:
    """Records for box-only predictions; the rasterised boxes stand in for the mask."""
    k = len(gt_boxes)
    ordered = sorted(pred, key=lambda b: -BoundingBox(*b).area)
    records = []
    for mode in MODES:
        boxes = ordered[:k] if mode == "equal" else list(pred)
        m = rasterize_boxes(boxes, shape)
        records.append(EvalRecord(image_id, mode, poi(m, gt_boxes), iou_boxes(boxes, gt_boxes, shape),
                                  len(boxes), k))
    return records


@dataclass
class EvalReport:
    records: list
    skipped_without_gt: int
    config: dict

    def means(self) -> dict:
        out = {}
        for mode in MODES:
            rows = [r for r in self.records if r.mode == mode]
            out[mode] = {
                "mean_poi": float(np.mean([r.poi for r in rows])) if rows else None,
                "mean_iou": float(np.mean([r.iou for r in rows])) if rows else None,
                "n_images": len(rows),
            }
        return out

    def summary(self) -> dict:
        return {
            "modes": self.means(),
            "n_evaluated": len({r.image_id for r in self.records}),
            "n_skipped_without_gt": self.skipped_without_gt,
            "poi_formula": POI_FORMULA,
            "iou_formula": IOU_FORMULA,
            "config": self.config,
        }

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out / "eval_report.csv", out / "eval_summary.json"
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_FIELDS)
            for r in self.records:
                w.writerow([r.image_id, r.mode, repr(r.poi), repr(r.iou), r.n_pred_boxes, r.n_gt_boxes])
        json_path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        return csv_path, json_path


def _with_gt(ds: Sequence[Sample]) -> tuple[list[Sample], int]:
    usable = [s for s in ds if s.abnormal and s.gt_boxes is not None]
    if not usable:
        raise ConfigError("no abnormal samples with ground-truth boxes to evaluate")
    return usable, len(ds) - len(usable)


def evaluate_dataset(model, ds: Sequence[Sample], cfg: Optional[ConstraintConfig] = None) -> EvalReport:
    """Tag every abnormal sample with ground truth and score both box modes."""
    usable, skipped = _with_gt(ds)
    records: list[EvalRecord] = []
    nets = model if not hasattr(model, "build_nets") else model.build_nets()
    cfg = cfg or ConstraintConfig.for_size(nets.arch.image_size)
    for s in usable:
        res = tag_image(nets, s.image, s.label, cfg, s.id, k=len(s.gt_boxes))
        records += score_mask(s.id, res.mask, s.gt_boxes)
    return EvalReport(records, skipped, {"constraint": cfg.to_dict()})


def _find_prediction(pred_dir: Path, sample_id: str) -> tuple[Optional[Path], Optional[Path]]:
    for mask_p, box_p in ((pred_dir / f"{sample_id}.png", pred_dir / f"{sample_id}.csv"),
                          (pred_dir / sample_id / "mask.png", pred_dir / sample_id / "boxes.csv")):
        if mask_p.is_file() or box_p.is_file():
            return (mask_p if mask_p.is_file() else None), (box_p if box_p.is_file() else None)
    return None, None


def compare_external(pred_dir, ds: Sequence[Sample]) -> EvalReport:
    """Score third-party predictions against the ground truth in ``ds``.

    For each sample id the directory may hold ``<id>.png`` (mask, nonzero =
    lesion) and/or ``<id>.csv`` (boxes), or the ``<id>/mask.png`` layout written
    by the tag command. Masks take precedence over boxes.
    """
    pred_dir = Path(pred_dir)
    usable, skipped = _with_gt(ds)
    records: list[EvalRecord] = []
    for s in usable:
        mask_p, box_p = _find_prediction(pred_dir, s.id)
        shape = s.image.shape
        if mask_p is not None:
            try:
                mask = (read_png(mask_p) > 127).astype(np.uint8)
            except OSError as exc:
                raise ManifestError(f"{mask_p}: cannot read prediction mask: {exc}") from exc
            if mask.shape != shape:
                raise ManifestError(f"{mask_p}: mask shape {mask.shape} != image shape {shape}")
            records += score_mask(s.id, mask, s.gt_boxes)
        elif box_p is not None:
            pred = read_boxes_csv(box_p)
            for b in pred:
                try:
                    b.validate(*shape)
                except DomainError as exc:
                    raise ManifestError(f"{box_p}: {exc}") from None
            records += score_boxes(s.id, pred, s.gt_boxes, shape)
        else:
            # no prediction means an empty mask
            records += score_mask(s.id, np.zeros(shape, dtype=np.uint8), s.gt_boxes)
    return EvalReport(records, skipped, {"external": str(pred_dir)})


def records_as_dicts(records) -> list[dict]:
    return [asdict(r) for r in records]
