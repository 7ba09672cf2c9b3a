"""IoU / mIoU metrics over frozen episode lists and k-fold cross-validation.

Per-class IoU accumulates intersection and union pixel counts across all of
a class's episodes (dataset-level IoU); a per-episode-mean variant is
available behind a flag. Predictions are upsampled to each query's original
resolution before scoring.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .dataset import DatasetIndex, FoldConfig
from .episodes import EpisodeSpec, materialize_episode, sample_training_pairs, sample_test_pairs
from .errors import EmptyEpisodeList, EmptyMaskAfterResize, ShapeMismatch
from .model import FssuwNet, ModelConfig

logger = logging.getLogger(__name__)


def iou(pred: torch.Tensor, gt: torch.Tensor) -> float:
    """|pred AND gt| / |pred OR gt|; both empty counts as perfect agreement."""
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    p, g = pred.bool(), gt.bool()
    union = (p | g).sum().item()
    if union == 0:
        return 1.0
    return (p & g).sum().item() / union


@dataclass
class MetricsReport:
    per_class_iou: dict[int, float]
    fold_miou: float
    fold_id: int
    n_episodes: int = 0
    n_skipped: int = 0
    mean_over_folds: float | None = None
    per_fold_miou: dict[int, float] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "fold_id": self.fold_id,
            "per_class_iou": {str(k): v for k, v in sorted(self.per_class_iou.items())},
            "fold_miou": self.fold_miou,
            "n_episodes": self.n_episodes,
            "n_skipped": self.n_skipped,
            "mean_over_folds": self.mean_over_folds,
            "per_fold_miou": {str(k): v for k, v in sorted(self.per_fold_miou.items())},
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        obj = json.loads(text)
        return cls(per_class_iou={int(k): v for k, v in obj["per_class_iou"].items()},
                   fold_miou=obj["fold_miou"], fold_id=obj["fold_id"],
                   n_episodes=obj.get("n_episodes", 0), n_skipped=obj.get("n_skipped", 0),
                   mean_over_folds=obj.get("mean_over_folds"),
                   per_fold_miou={int(k): v for k, v in obj.get("per_fold_miou", {}).items()})


@torch.no_grad()
def evaluate_fold(model: FssuwNet, episode_list: list[EpisodeSpec], index: DatasetIndex,
                  resolution: int = 256, fold_id: int = 0,
                  per_episode_mean: bool = False) -> MetricsReport:
    """Score a frozen episode list; IoU is computed at each query's original
    resolution with the prediction bilinearly upsampled."""
    if not episode_list:
        raise EmptyEpisodeList("no episodes to evaluate")
    model.eval()
    inter: dict[int, int] = {}
    union: dict[int, int] = {}
    per_episode: dict[int, list[float]] = {}
    n_done = n_skipped = 0
    for spec in episode_list:
        try:
            episode = materialize_episode(spec, index, resolution)
        except EmptyMaskAfterResize as exc:
            logger.warning("skipping eval episode: %s", exc)
            n_skipped += 1
            continue
        original = index.load_mask(spec.query_id)
        gt = (original == spec.class_id)
        pred = model.predict(episode, out_size=tuple(original.shape)).bool()
        cid = spec.class_id
        inter[cid] = inter.get(cid, 0) + (pred & gt).sum().item()
        union[cid] = union.get(cid, 0) + (pred | gt).sum().item()
        per_episode.setdefault(cid, []).append(iou(pred, gt))
        n_done += 1

    if per_episode_mean:
        per_class = {cid: sum(v) / len(v) for cid, v in per_episode.items()}
    else:
        per_class = {cid: (inter[cid] / union[cid] if union[cid] else 1.0) for cid in inter}
    if not per_class:
        raise EmptyEpisodeList("every episode in the list was rejected")
    miou = sum(per_class.values()) / len(per_class)
    return MetricsReport(per_class_iou=per_class, fold_miou=miou, fold_id=fold_id,
                         n_episodes=n_done, n_skipped=n_skipped)


def aggregate_reports(reports: list[MetricsReport]) -> MetricsReport:
    per_fold = {r.fold_id: r.fold_miou for r in reports}
    mean = sum(per_fold.values()) / len(per_fold)
    merged_classes = {}
    for r in reports:
        merged_classes.update(r.per_class_iou)
    return MetricsReport(per_class_iou=merged_classes, fold_miou=mean,
                         fold_id=-1, n_episodes=sum(r.n_episodes for r in reports),
                         n_skipped=sum(r.n_skipped for r in reports),
                         mean_over_folds=mean, per_fold_miou=per_fold)


def render_table(reports: list[MetricsReport], label: str = "mIoU") -> tuple[str, str]:
    """Per-fold mIoU table with a trailing Mean column; returns (markdown, csv)."""
    ordered = sorted(reports, key=lambda r: r.fold_id)
    headers = [f"Fold-{r.fold_id}" for r in ordered] + ["Mean"]
    mean = sum(r.fold_miou for r in ordered) / len(ordered)
    values = [r.fold_miou for r in ordered] + [mean]
    md = "| Metric | " + " | ".join(headers) + " |\n"
    md += "|---" * (len(headers) + 1) + "|\n"
    md += f"| {label} | " + " | ".join(f"{v:.4f}" for v in values) + " |\n"
    csv_text = "metric," + ",".join(headers) + "\n"
    csv_text += label + "," + ",".join(f"{v:.6f}" for v in values) + "\n"
    return md, csv_text


def cross_validate(train_fn, model_cfg: ModelConfig, folds: list[FoldConfig],
                   index: DatasetIndex, n_train: int, n_test: int, seed: int,
                   k: int = 1, resolution: int = 256,
                   out_dir=None) -> tuple[MetricsReport, list[MetricsReport]]:
    """Train and evaluate per fold; ``train_fn(fold, specs) -> FssuwNet``.

    Returns the aggregate report plus per-fold reports, and writes results
    table files (markdown + CSV) under ``out_dir`` when given.
    """
    reports = []
    for fold in folds:
        train_specs = sample_training_pairs(fold, index, n=n_train, seed=seed, k=k)
        test_specs = sample_test_pairs(fold, index, n=n_test, seed=seed, k=k)
        model = train_fn(fold, train_specs)
        reports.append(evaluate_fold(model, test_specs, index, resolution,
                                     fold_id=fold.fold_id))
    aggregate = aggregate_reports(reports)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        md, csv_text = render_table(reports)
        (out_dir / "results.md").write_text(md)
        (out_dir / "results.csv").write_text(csv_text)
        (out_dir / "report.json").write_text(aggregate.to_json())
    return aggregate, reports
