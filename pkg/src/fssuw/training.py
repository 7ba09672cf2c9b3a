"""Episodic training loop: SGD with momentum, stepwise lr decay, per-epoch
checkpoints that resume bit-exactly, and a finite-difference gradient audit.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import weights as weights_io
from .dataset import DatasetIndex
from .episodes import Episode, EpisodeSpec, materialize_episode
from .errors import ConfigMismatch, EmptyMaskAfterResize, NonFiniteLoss
from .losses import align_loss, total_loss
from .model import FssuwNet, ModelConfig

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "ce", "dice", "align", "total", "lr")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 1
    lr0: float = 0.001
    lr_decay: float = 0.1
    decay_every: int = 10000
    momentum: float = 0.9
    weight_decay: float = 0.0005
    seed: int = 0
    k_shot: int = 1
    resolution: int = 256
    use_align: bool = True
    deterministic: bool = True

    def __post_init__(self):
        for name in ("epochs", "lr0", "lr_decay", "decay_every", "momentum",
                     "weight_decay", "resolution"):
            if getattr(self, name) <= 0 and name not in ("momentum", "weight_decay"):
                raise ValueError(f"{name} must be positive")
        if self.batch_size != 1:
            raise ValueError("one episode per iteration is the episodic unit; batch_size must be 1")
        if self.k_shot not in (1, 5):
            raise ValueError("k_shot must be 1 or 5")


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Stepwise schedule, a pure function of the 0-based iteration counter."""
    return cfg.lr0 * cfg.lr_decay ** (iteration // cfg.decay_every)


def config_hash(train_cfg: TrainConfig, model_cfg: ModelConfig) -> str:
    # epochs is the stop point, not part of the trajectory; resuming to a
    # later stop point must stay compatible
    t = asdict(train_cfg)
    t.pop("epochs")
    blob = json.dumps({"train": t, "model": model_cfg.fingerprint()},
                      sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def seed_everything(seed: int, deterministic: bool = True):
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


@dataclass
class TrainResult:
    model: FssuwNet
    log_rows: list[dict]
    checkpoint_path: Path | None
    iterations: int


def episode_loss(model: FssuwNet, episode: Episode, use_align: bool = True):
    """Forward pass plus full objective; returns (scalar tensor, LossBreakdown)."""
    out = model(episode)
    align = None
    if use_align:
        align = align_loss(out.f_supports, [m for _, m in episode.supports],
                           out.f_query, out.feature_logits, model.temperature)
    return total_loss(out.query_logits, episode.query_gt, align)


def save_checkpoint(path, model: FssuwNet, optimizer: torch.optim.SGD,
                    iteration: int, epoch: int, cfg_hash: str) -> Path:
    tensors = {f"model/{k}": v.detach().cpu().numpy()
               for k, v in model.state_dict().items()}
    for name, param in model.named_parameters():
        state = optimizer.state.get(param, {})
        buf = state.get("momentum_buffer")
        if buf is not None:
            tensors[f"optim/momentum/{name}"] = buf.detach().cpu().numpy()
    tensors["rng/torch"] = torch.get_rng_state().numpy()
    meta = {
        "iteration": iteration,
        "epoch": epoch,
        "config_hash": cfg_hash,
        "rng_python": json.dumps(random.getstate()),
        "rng_numpy": json.dumps({
            "keys": np.random.get_state()[1].tolist(),
            "pos": int(np.random.get_state()[2]),
        }),
    }
    arch = weights_io.arch_hash(weights_io.module_layout(model), model.config.fingerprint())
    return weights_io.save_container(path, tensors, arch, meta)


def load_checkpoint(path, model: FssuwNet, optimizer: torch.optim.SGD | None = None,
                    expect_cfg_hash: str | None = None) -> dict:
    arch = weights_io.arch_hash(weights_io.module_layout(model), model.config.fingerprint())
    tensors, meta, _ = weights_io.load_container(path, expected_arch=arch)
    if expect_cfg_hash is not None and meta.get("config_hash") != expect_cfg_hash:
        raise ConfigMismatch(f"{path}: checkpoint was written under a different run config")
    model.load_state_dict({k[len("model/"):]: torch.from_numpy(v)
                           for k, v in tensors.items() if k.startswith("model/")})
    if optimizer is not None:
        named = dict(model.named_parameters())
        for key, arr in tensors.items():
            if key.startswith("optim/momentum/"):
                param = named[key[len("optim/momentum/"):]]
                optimizer.state[param] = {"momentum_buffer": torch.from_numpy(arr.copy())}
    if "rng/torch" in tensors:
        torch.set_rng_state(torch.from_numpy(tensors["rng/torch"].copy()))
    if "rng_python" in meta:
        state = json.loads(meta["rng_python"])
        random.setstate((state[0], tuple(state[1]), state[2]))
    return meta


def train(train_cfg: TrainConfig, model_cfg: ModelConfig, specs: list[EpisodeSpec],
          index: DatasetIndex, out_dir=None, resume_from=None,
          model: FssuwNet | None = None) -> TrainResult:
    """Run the episodic loop over ``specs`` in list order, once per epoch.

    Writes a streaming CSV log and a rolling per-epoch checkpoint when
    ``out_dir`` is given. ``resume_from`` restores model, momentum and the
    iteration counter from a checkpoint and continues to ``epochs``.
    """
    if not specs:
        raise ValueError("episode list is empty")
    seed_everything(train_cfg.seed, train_cfg.deterministic)
    if model is None:
        model = FssuwNet(model_cfg)
    model.train()

    optimizer = torch.optim.SGD(model.parameters(), lr=train_cfg.lr0,
                                momentum=train_cfg.momentum,
                                weight_decay=train_cfg.weight_decay)
    cfg_hash = config_hash(train_cfg, model_cfg)

    start_epoch, iteration = 0, 0
    if resume_from is not None:
        meta = load_checkpoint(resume_from, model, optimizer, expect_cfg_hash=cfg_hash)
        start_epoch, iteration = int(meta["epoch"]), int(meta["iteration"])

    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_path = None
    log_fh = writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = out_dir / "checkpoint.fssw"
        log_path = out_dir / "train_log.csv"
        fresh = resume_from is None or not log_path.exists()
        log_fh = open(log_path, "a", newline="")
        writer = csv.writer(log_fh)
        if fresh:
            writer.writerow(LOG_COLUMNS)

    log_rows: list[dict] = []
    try:
        for epoch in range(start_epoch, train_cfg.epochs):
            for spec in specs:
                try:
                    episode = materialize_episode(spec, index, train_cfg.resolution)
                except EmptyMaskAfterResize as exc:
                    logger.warning("skipping episode %s: %s", spec.seed_tag or spec.query_id, exc)
                    continue
                lr = lr_at(iteration, train_cfg)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                optimizer.zero_grad()
                loss, breakdown = episode_loss(model, episode, train_cfg.use_align)
                if not math.isfinite(breakdown.total):
                    _dump_nonfinite(out_dir, spec, iteration, breakdown)
                    raise NonFiniteLoss(
                        f"non-finite loss {breakdown.total} at iteration {iteration} "
                        f"(episode query={spec.query_id}, class={spec.class_id})")
                loss.backward()
                optimizer.step()
                row = {"iter": iteration, "ce": breakdown.ce, "dice": breakdown.dice,
                       "align": breakdown.align_loss, "total": breakdown.total, "lr": lr}
                log_rows.append(row)
                if writer is not None:
                    writer.writerow([row[c] for c in LOG_COLUMNS])
                    log_fh.flush()
                iteration += 1
            if ckpt_path is not None:
                save_checkpoint(ckpt_path, model, optimizer, iteration, epoch + 1, cfg_hash)
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(model=model, log_rows=log_rows, checkpoint_path=ckpt_path,
                       iterations=iteration)


def _dump_nonfinite(out_dir, spec, iteration, breakdown):
    if out_dir is None:
        return
    payload = {"iteration": iteration, "class_id": spec.class_id,
               "support_ids": list(spec.support_ids), "query_id": spec.query_id,
               "breakdown": asdict(breakdown)}
    (Path(out_dir) / "nonfinite_episode.json").write_text(json.dumps(payload, indent=2))


@dataclass
class AuditReport:
    max_rel_err: float
    mean_rel_err: float
    n_checked: int
    per_param: dict[str, float] = field(default_factory=dict)


def gradient_audit(model: FssuwNet, episode: Episode, use_align: bool = True,
                   fraction: float = 0.01, step: float = 1e-5, seed: int = 0,
                   max_samples: int = 300, rel_floor: float = 1e-6) -> AuditReport:
    """Compare analytic parameter gradients of the total loss against central
    finite differences on a random parameter subsample, at float64.

    Relative error uses ``|a - f| / max(|a|, |f|, rel_floor)`` so dead-zero
    gradients do not divide by noise.
    """
    m = copy.deepcopy(model).double()
    ep = Episode(
        supports=[(img.double(), msk) for img, msk in episode.supports],
        query_image=episode.query_image.double(), query_gt=episode.query_gt,
        class_id=episode.class_id, query_id=episode.query_id,
        support_ids=episode.support_ids,
    )

    def closure() -> torch.Tensor:
        loss, _ = episode_loss(m, ep, use_align)
        return loss

    m.zero_grad()
    closure().backward()
    named = [(n, p) for n, p in m.named_parameters() if p.requires_grad]
    flat_index = [(ni, j) for ni, (_, p) in enumerate(named) for j in range(p.numel())]
    rng = random.Random(seed)
    n_pick = min(max_samples, max(1, int(len(flat_index) * fraction)))
    picks = rng.sample(flat_index, n_pick)

    rel_errs, per_param = [], {}
    with torch.no_grad():
        for ni, j in picks:
            name, p = named[ni]
            analytic = p.grad.reshape(-1)[j].item()
            orig = p.reshape(-1)[j].item()
            p.reshape(-1)[j] = orig + step
            up = closure().item()
            p.reshape(-1)[j] = orig - step
            down = closure().item()
            p.reshape(-1)[j] = orig
            fd = (up - down) / (2 * step)
            rel = abs(analytic - fd) / max(abs(analytic), abs(fd), rel_floor)
            rel_errs.append(rel)
            per_param[name] = max(per_param.get(name, 0.0), rel)
    return AuditReport(max_rel_err=max(rel_errs), mean_rel_err=sum(rel_errs) / len(rel_errs),
                       n_checked=len(rel_errs), per_param=per_param)
