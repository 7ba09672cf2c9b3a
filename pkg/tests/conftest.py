import numpy as np
import pytest
import torch
from PIL import Image

from fssuw.dataset import ClassEntry, ClassMap, load_dataset

SUIM_NAMES = ["HD", "PF", "WR", "RO", "RI", "FV", "SR"]


def write_sample(root, stem, size, regions, colors):
    """Write one image + RGB-coded mask; ``regions`` maps color -> one
    (r0, r1, c0, c1) box or a list of boxes."""
    img = np.full((size, size, 3), 90, dtype=np.uint8)
    mask = np.zeros((size, size, 3), dtype=np.uint8)
    for color, boxes in regions.items():
        if isinstance(boxes, tuple):
            boxes = [boxes]
        for r0, r1, c0, c1 in boxes:
            mask[r0:r1, c0:c1] = color
            img[r0:r1, c0:c1] = [min(255, c + 80) for c in colors.get(color, color)]
    (root / "images").mkdir(exist_ok=True, parents=True)
    (root / "masks").mkdir(exist_ok=True, parents=True)
    Image.fromarray(img).save(root / "images" / f"{stem}.png")
    Image.fromarray(mask).save(root / "masks" / f"{stem}.png")


def make_suim_like_corpus(root, per_class=3, size=64):
    """Corpus exposing all seven SUIM class names, one big target per image."""
    cmap = ClassMap.suim()
    colors = {tuple(e.mask_code): tuple(e.mask_code) for e in cmap.entries}
    for e in cmap.entries:
        for i in range(per_class):
            off = 4 * i
            regions = {tuple(e.mask_code): (8 + off, 40 + off, 8 + off, 40 + off)}
            write_sample(root, f"{e.name.lower()}_{i}", size, regions, colors)
    return cmap


@pytest.fixture
def suim_corpus(tmp_path):
    root = tmp_path / "suim"
    cmap = make_suim_like_corpus(root)
    return root, cmap


@pytest.fixture
def suim_index(suim_corpus):
    root, cmap = suim_corpus
    return load_dataset(root, cmap)


@pytest.fixture
def tiny_class_map():
    return ClassMap([ClassEntry(1, "a", (255, 0, 0)), ClassEntry(2, "b", (0, 255, 0)),
                     ClassEntry(3, "c", (0, 0, 255))])


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(1234)
    yield


def rand_mask(h, w, p=0.5, generator=None):
    m = (torch.rand(h, w, generator=generator) < p).to(torch.uint8)
    if not m.any():
        m[h // 2, w // 2] = 1
    if m.all():
        m[0, 0] = 0
    return m
