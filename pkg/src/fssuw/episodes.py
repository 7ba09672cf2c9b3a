"""Episode specs, reproducible samplers and episode materialization.

An episode list is the unit of reproducibility: evaluation always consumes
a frozen JSON-lines file (one ``{"class", "support", "query", "k"}`` object
per line), never live sampling. Samplers are pure functions of
(fold, seed, corpus), with instance pools sorted by source id so ordering
does not depend on filesystem enumeration.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from .dataset import DatasetIndex, FoldConfig
from .errors import ClassTooSmall, EmptyMaskAfterResize

NORM_MEAN = (0.485, 0.456, 0.406)
NORM_STD = (0.229, 0.224, 0.225)

DEFAULT_RESOLUTION = 256


@dataclass(frozen=True)
class EpisodeSpec:
    class_id: int
    support_ids: tuple[str, ...]
    query_id: str
    seed_tag: str = field(default="", compare=False)

    def __post_init__(self):
        if self.query_id in self.support_ids:
            raise ValueError("query must be distinct from all supports")

    @property
    def k(self) -> int:
        return len(self.support_ids)


@dataclass
class Episode:
    supports: list[tuple[torch.Tensor, torch.Tensor]]  # K x ([3,R,R], [R,R] {0,1})
    query_image: torch.Tensor                          # [3,R,R]
    query_gt: torch.Tensor                             # [R,R] {0,1}
    class_id: int
    query_id: str = ""
    support_ids: tuple[str, ...] = ()

    @property
    def k(self) -> int:
        return len(self.supports)


def _sample_specs(classes: frozenset[int], index: DatasetIndex, n: int, seed: int,
                  k: int, tag: str) -> list[EpisodeSpec]:
    pools = {}
    for cid in sorted(classes):
        pool = index.instances(cid)
        if len(pool) < k + 1:
            raise ClassTooSmall(
                f"class {cid} has {len(pool)} instance(s); k={k} episodes need {k + 1}")
        pools[cid] = pool
    # string seeding keeps random.Random stable across platforms
    rng = random.Random(f"{tag}:{seed}")
    ordered_classes = sorted(classes)
    specs = []
    for i in range(n):
        cid = rng.choice(ordered_classes)
        pool = pools[cid]
        query = rng.choice(pool)
        supports = rng.sample([s for s in pool if s != query], k)
        specs.append(EpisodeSpec(class_id=cid, support_ids=tuple(supports),
                                 query_id=query, seed_tag=f"{tag}:{seed}:{i}"))
    return specs


def sample_training_pairs(fold: FoldConfig, index: DatasetIndex, n: int = 1000,
                          seed: int = 0, k: int = 1) -> list[EpisodeSpec]:
    """Draw ``n`` episode specs uniformly over train classes, then uniformly
    over support/query combinations within the class. Identical
    (fold, seed, corpus) input reproduces the identical list."""
    return _sample_specs(fold.train_classes, index, n, seed, k,
                         tag=f"{fold.scheme}-fold{fold.fold_id}-train")


def sample_test_pairs(fold: FoldConfig, index: DatasetIndex, n: int,
                      seed: int, k: int = 1) -> list[EpisodeSpec]:
    return _sample_specs(fold.test_classes, index, n, seed, k,
                         tag=f"{fold.scheme}-fold{fold.fold_id}-test")


def write_episode_list(specs: list[EpisodeSpec], path) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        for s in specs:
            fh.write(json.dumps({"class": s.class_id, "support": list(s.support_ids),
                                 "query": s.query_id, "k": s.k}) + "\n")
    return path


def read_episode_list(path) -> list[EpisodeSpec]:
    specs = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            specs.append(EpisodeSpec(class_id=int(obj["class"]),
                                     support_ids=tuple(obj["support"]),
                                     query_id=obj["query"]))
    return specs


def freeze_test_pairs(fold: FoldConfig, index: DatasetIndex, n: int, seed: int,
                      out_path, k: int = 1) -> Path:
    """Sample over the fold's test classes and persist the list so evaluation
    pairs are fixed artifacts."""
    return write_episode_list(sample_test_pairs(fold, index, n, seed, k), out_path)


def _resize_image(image: torch.Tensor, resolution: int) -> torch.Tensor:
    return F.interpolate(image[None], size=(resolution, resolution),
                         mode="bilinear", align_corners=False)[0]


def _resize_labels(mask: torch.Tensor, resolution: int) -> torch.Tensor:
    out = F.interpolate(mask[None, None].float(), size=(resolution, resolution),
                        mode="nearest")
    return out[0, 0].long()


def normalize_image(image: torch.Tensor, mean=NORM_MEAN, std=NORM_STD) -> torch.Tensor:
    m = torch.tensor(mean, dtype=image.dtype).view(3, 1, 1)
    s = torch.tensor(std, dtype=image.dtype).view(3, 1, 1)
    return (image - m) / s


def materialize_episode(spec: EpisodeSpec, index: DatasetIndex,
                        resolution: int = DEFAULT_RESOLUTION,
                        mean=NORM_MEAN, std=NORM_STD) -> Episode:
    """Resolve a spec into resized, normalized tensors.

    Images are bilinearly resized and channel-normalized; masks are
    nearest-neighbor resized then binarized against the spec's class. A
    support mask that loses all foreground in the resize raises
    :class:`EmptyMaskAfterResize` so the caller can reject the episode.
    """
    supports = []
    for sid in spec.support_ids:
        img = normalize_image(_resize_image(index.load_image(sid), resolution), mean, std)
        m = (_resize_labels(index.load_mask(sid), resolution) == spec.class_id).to(torch.uint8)
        if not m.any():
            raise EmptyMaskAfterResize(
                f"support {sid} lost all class-{spec.class_id} pixels at {resolution}px")
        supports.append((img, m))
    q_img = normalize_image(_resize_image(index.load_image(spec.query_id), resolution), mean, std)
    q_gt = (_resize_labels(index.load_mask(spec.query_id), resolution) == spec.class_id).to(torch.uint8)
    return Episode(supports=supports, query_image=q_img, query_gt=q_gt,
                   class_id=spec.class_id, query_id=spec.query_id,
                   support_ids=spec.support_ids)
