"""Corpus ingestion, class maps, small-target filtering and fold splits.

Expected layout: ``root/images/*.png|jpg`` with name-matched ``root/masks/*.png``.
Masks are either RGB color-coded (one color per class) or single-channel
integer label maps; the :class:`ClassMap` decides which. Label 0 / color
(0,0,0) is always background (waterbody).
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import InsufficientClasses, MissingDirectory, UnknownClass, UnmappableMaskColor

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")

# scheme names
UWS4 = "uws4"
SUIM2 = "suim2"
CUSTOM = "custom"

SUIM_SPLIT0_TEST = ("HD", "PF", "RI", "RO")
SUIM_SPLIT1_TEST = ("FV", "SR", "WR")


@dataclass(frozen=True)
class ClassEntry:
    class_id: int
    name: str
    mask_code: int | tuple[int, int, int]


class ClassMap:
    """Registry mapping class ids to names and mask colors/labels."""

    def __init__(self, entries: list[ClassEntry]):
        ids = [e.class_id for e in entries]
        codes = [e.mask_code for e in entries]
        if len(set(ids)) != len(ids):
            raise ValueError("class ids must be unique")
        if any(i <= 0 for i in ids):
            raise ValueError("class ids must be positive (0 is background)")
        if len(set(codes)) != len(codes):
            raise ValueError("mask codes must be unique")
        kinds = {isinstance(c, tuple) for c in codes}
        if len(kinds) > 1:
            raise ValueError("mask codes must be all RGB triples or all label ints")
        self.entries = sorted(entries, key=lambda e: e.class_id)
        self.rgb_coded = isinstance(codes[0], tuple) if codes else True
        self._by_name = {e.name: e for e in self.entries}
        self._by_id = {e.class_id: e for e in self.entries}

    def __len__(self):
        return len(self.entries)

    def class_ids(self) -> list[int]:
        return [e.class_id for e in self.entries]

    def id_of(self, name: str) -> int:
        if name not in self._by_name:
            raise UnknownClass(f"class name {name!r} is not registered")
        return self._by_name[name].class_id

    def name_of(self, class_id: int) -> str:
        if class_id not in self._by_id:
            raise UnknownClass(f"class id {class_id} is not registered")
        return self._by_id[class_id].name

    def __contains__(self, class_id: int) -> bool:
        return class_id in self._by_id

    @classmethod
    def from_csv(cls, path) -> "ClassMap":
        """Rows are either ``class_id,name,R,G,B`` or ``class_id,name,label``."""
        entries = []
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].lstrip().startswith("#"):
                    continue
                cid, name = int(row[0]), row[1].strip()
                if len(row) >= 5:
                    code: int | tuple[int, int, int] = (int(row[2]), int(row[3]), int(row[4]))
                else:
                    code = int(row[2])
                entries.append(ClassEntry(cid, name, code))
        return cls(entries)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            for e in self.entries:
                code = e.mask_code if isinstance(e.mask_code, tuple) else (e.mask_code,)
                writer.writerow([e.class_id, e.name, *code])

    @classmethod
    def suim(cls) -> "ClassMap":
        """The seven SUIM target categories with their binary RGB mask codes
        (waterbody (0,0,0) is background)."""
        return cls([
            ClassEntry(1, "HD", (0, 0, 255)),     # human divers
            ClassEntry(2, "PF", (0, 255, 0)),     # aquatic plants / sea-grass
            ClassEntry(3, "WR", (0, 255, 255)),   # wrecks and ruins
            ClassEntry(4, "RO", (255, 0, 0)),     # robots
            ClassEntry(5, "RI", (255, 0, 255)),   # reefs and invertebrates
            ClassEntry(6, "FV", (255, 255, 0)),   # fish and vertebrates
            ClassEntry(7, "SR", (255, 255, 255)), # sea-floor and rocks
        ])


@dataclass
class ImageSample:
    """One image with its integer label mask."""

    image: torch.Tensor      # [3, H, W] float in [0, 1]
    raw_mask: torch.Tensor   # [H, W] int64 labels
    classes_present: frozenset[int]
    source_id: str


@dataclass
class SampleRecord:
    source_id: str
    image_path: Path
    shape: tuple[int, int]
    label_mask: np.ndarray                 # [H, W] uint8/uint16 labels
    class_pixels: dict[int, int] = field(default_factory=dict)

    @property
    def classes_present(self) -> frozenset[int]:
        return frozenset(self.class_pixels)


@dataclass(frozen=True)
class FoldConfig:
    fold_id: int
    train_classes: frozenset[int]
    test_classes: frozenset[int]
    scheme: str

    def __post_init__(self):
        if self.train_classes & self.test_classes:
            raise ValueError("train and test classes overlap")


def _decode_mask(path: Path, class_map: ClassMap) -> np.ndarray:
    """Translate a mask file to integer labels, validating every pixel."""
    img = Image.open(path)
    if class_map.rgb_coded:
        arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
        flat = arr.reshape(-1, 3)
        colors, inverse = np.unique(flat, axis=0, return_inverse=True)
        lookup = {tuple(e.mask_code): e.class_id for e in class_map.entries}
        lookup[(0, 0, 0)] = 0
        labels = np.zeros(len(colors), dtype=np.int64)
        for i, color in enumerate(map(tuple, colors.tolist())):
            if color not in lookup:
                raise UnmappableMaskColor(
                    f"{path.name}: mask color {color} is not registered and not background")
            labels[i] = lookup[color]
        return labels[inverse].reshape(arr.shape[:2])
    arr = np.asarray(img.convert("I"), dtype=np.int64)
    known = {e.mask_code for e in class_map.entries} | {0}
    present = set(np.unique(arr).tolist())
    bad = present - known
    if bad:
        raise UnmappableMaskColor(
            f"{path.name}: mask labels {sorted(bad)} are not registered and not background")
    return arr


class DatasetIndex:
    """In-memory index over a corpus; masks are decoded eagerly, image pixels
    load lazily and are cached."""

    def __init__(self, records: list[SampleRecord], class_map: ClassMap, root: Path | None = None):
        self.records = {r.source_id: r for r in records}
        self.class_map = class_map
        self.root = root
        self._image_cache: dict[str, torch.Tensor] = {}

    def __len__(self):
        return len(self.records)

    def __contains__(self, source_id: str) -> bool:
        return source_id in self.records

    def source_ids(self) -> list[str]:
        return sorted(self.records)

    def instances(self, class_id: int) -> list[str]:
        """Source ids containing ``class_id``, sorted for reproducibility."""
        if class_id not in self.class_map:
            raise UnknownClass(f"class id {class_id} is not registered")
        return sorted(sid for sid, r in self.records.items() if class_id in r.class_pixels)

    def load_image(self, source_id: str) -> torch.Tensor:
        if source_id not in self._image_cache:
            rec = self.records[source_id]
            arr = np.asarray(Image.open(rec.image_path).convert("RGB"), dtype=np.float32) / 255.0
            self._image_cache[source_id] = torch.from_numpy(arr).permute(2, 0, 1).contiguous()
        return self._image_cache[source_id]

    def load_mask(self, source_id: str) -> torch.Tensor:
        return torch.from_numpy(self.records[source_id].label_mask.astype(np.int64))

    def sample(self, source_id: str) -> ImageSample:
        rec = self.records[source_id]
        return ImageSample(image=self.load_image(source_id), raw_mask=self.load_mask(source_id),
                           classes_present=rec.classes_present, source_id=source_id)

    def content_hash(self) -> str:
        """Stable digest of (source ids, label masks, image bytes)."""
        h = hashlib.sha256()
        for sid in self.source_ids():
            rec = self.records[sid]
            h.update(sid.encode())
            h.update(np.ascontiguousarray(rec.label_mask).tobytes())
            h.update(rec.image_path.read_bytes())
        return h.hexdigest()


def load_dataset(root, class_map: ClassMap) -> DatasetIndex:
    """Index ``root/images`` against ``root/masks`` (name-matched stems).

    Images without a matching mask are skipped with a warning; mask pixels
    outside the class map raise :class:`UnmappableMaskColor`.
    """
    root = Path(root)
    images_dir, masks_dir = root / "images", root / "masks"
    for d in (images_dir, masks_dir):
        if not d.is_dir():
            raise MissingDirectory(f"expected directory {d}")

    masks_by_stem = {p.stem: p for p in sorted(masks_dir.iterdir()) if p.suffix.lower() == ".png"}
    records = []
    skipped = []
    for img_path in sorted(images_dir.iterdir()):
        if img_path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        mask_path = masks_by_stem.get(img_path.stem)
        if mask_path is None:
            skipped.append(img_path.name)
            continue
        labels = _decode_mask(mask_path, class_map)
        ids, counts = np.unique(labels, return_counts=True)
        class_pixels = {int(i): int(c) for i, c in zip(ids, counts) if i != 0}
        records.append(SampleRecord(
            source_id=img_path.stem,
            image_path=img_path,
            shape=labels.shape,
            label_mask=labels.astype(np.uint16 if labels.max() > 255 else np.uint8),
            class_pixels=class_pixels,
        ))
    if skipped:
        logger.warning("skipped %d image(s) without a matching mask: %s",
                       len(skipped), ", ".join(skipped[:10]))
    return DatasetIndex(records, class_map, root=root)


def filter_small_targets(index: DatasetIndex, class_id: int,
                         min_fraction: float = 0.10) -> DatasetIndex:
    """Drop (sample, class) instances whose foreground covers strictly less
    than ``min_fraction`` of the image; exact-threshold instances stay."""
    if not 0 < min_fraction < 1:
        raise ValueError("min_fraction must lie in (0, 1)")
    if class_id not in index.class_map:
        raise UnknownClass(f"class id {class_id} is not registered")
    records = []
    for sid in index.source_ids():
        rec = index.records[sid]
        pixels = dict(rec.class_pixels)
        if class_id in pixels:
            h, w = rec.shape
            if pixels[class_id] < min_fraction * (h * w):
                del pixels[class_id]
        records.append(replace(rec, class_pixels=pixels))
    return DatasetIndex(records, index.class_map, root=index.root)


def filter_all_small_targets(index: DatasetIndex, min_fraction: float = 0.10) -> DatasetIndex:
    for cid in index.class_map.class_ids():
        index = filter_small_targets(index, cid, min_fraction)
    return index


def build_folds(index: DatasetIndex, scheme: str,
                grouping: list[list[int]] | None = None) -> list[FoldConfig]:
    """Partition registered classes into disjoint train/test folds.

    ``suim2`` pins split-0 test classes to {HD, PF, RI, RO} and split-1 to
    {FV, SR, WR}. ``uws4`` assigns classes round-robin by sorted id into 4
    groups unless an explicit ``grouping`` (list of class-id lists, one per
    fold) is provided.
    """
    all_ids = frozenset(index.class_map.class_ids())
    scheme = scheme.lower()
    if scheme == SUIM2:
        wanted = SUIM_SPLIT0_TEST + SUIM_SPLIT1_TEST
        missing = [n for n in wanted if n not in {e.name for e in index.class_map.entries}]
        if missing:
            raise InsufficientClasses(f"suim2 scheme needs classes {missing} in the class map")
        groups = [frozenset(index.class_map.id_of(n) for n in SUIM_SPLIT0_TEST),
                  frozenset(index.class_map.id_of(n) for n in SUIM_SPLIT1_TEST)]
    elif scheme == UWS4:
        n_folds = 4
        if grouping is not None:
            groups = [frozenset(g) for g in grouping]
            if len(groups) != n_folds:
                raise InsufficientClasses(f"grouping file must define {n_folds} folds")
        else:
            ordered = sorted(all_ids)
            if len(ordered) < n_folds:
                raise InsufficientClasses(
                    f"uws4 needs at least {n_folds} classes, got {len(ordered)}")
            groups = [frozenset(ordered[i::n_folds]) for i in range(n_folds)]
    elif scheme == CUSTOM:
        if not grouping:
            raise InsufficientClasses("custom scheme requires an explicit grouping")
        groups = [frozenset(g) for g in grouping]
    else:
        raise ValueError(f"unknown fold scheme {scheme!r}")

    covered = frozenset().union(*groups)
    if covered != all_ids:
        raise InsufficientClasses(
            f"fold groups must cover exactly the registered classes; "
            f"missing {sorted(all_ids - covered)}, extra {sorted(covered - all_ids)}")
    return [
        FoldConfig(fold_id=i, train_classes=all_ids - g, test_classes=g, scheme=scheme)
        for i, g in enumerate(groups)
    ]


def folds_to_json(folds: list[FoldConfig]) -> str:
    import json
    return json.dumps([
        {"fold_id": f.fold_id, "scheme": f.scheme,
         "train_classes": sorted(f.train_classes), "test_classes": sorted(f.test_classes)}
        for f in folds
    ], indent=2)
