"""Two-stage training, checkpoints and generation.

Stage 1 fits G1 on the L1 + background objective.  Stage 2 freezes G1 and
alternates one discriminator step (D1 and D2 together) with one G2 step.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .config import TrainConfig, save_config
from .data import EncodedPairs, PairRecord, batch_for_step, encode_records, write_image
from .losses import (
    LossWeights, ScaleLogits, background_loss, l1_loss, scale_logits, stage1_loss, stage2_loss,
)
from .networks import Discriminator, GeneratorG1, GeneratorG2, build_network, merge
from .networks.specs import DEFAULT_IMAGE_SIZE
from .pose import KeypointSet, downsample, encode_heatmaps

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "posetransfer-checkpoint"
STAGE1_COLUMNS = ("step", "total", "l1", "bg", "wall_time")
STAGE2_COLUMNS = ("step", "g_total", "d_total", "g_adv", "l1", "bg", "wall_time")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, components: dict[str, float]):
        self.step = step
        self.components = components
        detail = ", ".join(f"{k}={v:.6g}" for k, v in components.items())
        super().__init__(f"non-finite loss at step {step}: {detail}")


class CheckpointError(ValueError):
    pass


@dataclass
class TrainResult:
    checkpoint: Optional[Path]
    history: list[dict] = field(default_factory=list)
    networks: dict[str, torch.nn.Module] = field(default_factory=dict)


# checkpoints

def save_checkpoint(path: str | Path, *, stage: int, step: int, networks: dict,
                    optimizers: dict, config: TrainConfig) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "stage": stage,
        "step": step,
        "profile": config.profile,
        "networks": {k: {"arch": n.arch(), "state": n.state_dict()} for k, n in networks.items()},
        "optimizers": {k: o.state_dict() for k, o in optimizers.items()},
        "config": config.to_dict(),
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint not found: {path}") from exc
    except Exception as exc:  # torch raises assorted unpickling errors
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    return payload


def restore_network(payload: dict, key: str) -> torch.nn.Module:
    if key not in payload["networks"]:
        raise CheckpointError(f"checkpoint has no {key!r} network (has {sorted(payload['networks'])})")
    entry = payload["networks"][key]
    net = build_network(entry["arch"])
    net.load_state_dict(entry["state"])
    return net


def parameter_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# helpers

def _image_size(config: TrainConfig) -> tuple[int, int]:
    return tuple(config.image_size or DEFAULT_IMAGE_SIZE[config.profile])


def _encode(dataset, config: TrainConfig) -> EncodedPairs:
    if isinstance(dataset, EncodedPairs):
        enc = dataset
    else:
        if not dataset:
            raise ValueError("dataset is empty")
        enc = encode_records(dataset, config.sigma, config.dilate_radius)
    if tuple(enc.x.shape[2:]) != _image_size(config):
        raise ValueError(f"dataset images are {tuple(enc.x.shape[2:])}, config expects {_image_size(config)}")
    return enc


def _adam(params, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=config.learning_rate,
                            betas=(config.adam_beta1, config.adam_beta2))


def _check_finite(step: int, components: dict[str, torch.Tensor]) -> dict[str, float]:
    vals = {k: float(v.detach()) for k, v in components.items()}
    if not all(np.isfinite(v) for v in vals.values()):
        raise TrainingDiverged(step, vals)
    return vals


class _RunLog:
    def __init__(self, run_dir: Optional[Path], columns: Sequence[str], append: bool = False):
        self.columns = columns
        self.rows: list[dict] = []
        self.fh = None
        self.t0 = time.perf_counter()
        if run_dir is not None:
            path = run_dir / "log.csv"
            mode = "a" if append and path.exists() else "w"
            self.fh = open(path, mode, newline="")
            self.writer = csv.DictWriter(self.fh, fieldnames=list(columns))
            if mode == "w":
                self.writer.writeheader()

    def add(self, row: dict, write: bool) -> None:
        row = {**row, "wall_time": round(time.perf_counter() - self.t0, 3)}
        self.rows.append(row)
        if self.fh is not None and write:
            self.writer.writerow({k: (repr(v) if isinstance(v, float) and k != "wall_time" else v)
                                  for k, v in row.items()})
            self.fh.flush()

    def close(self) -> None:
        if self.fh is not None:
            self.fh.close()


def _prepare_run_dir(run_dir, config: TrainConfig, resume: bool) -> Optional[Path]:
    if run_dir is None:
        return None
    run_dir = Path(run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (run_dir / "samples").mkdir(parents=True, exist_ok=True)
    save_config(config, run_dir / "config.json")
    return run_dir


def _write_grid(path: Path, rows: list[list[torch.Tensor]]) -> None:
    """Each row: a list of (3, H, W) images in [-1, 1]."""
    grid = torch.cat([torch.cat(r, dim=2) for r in rows], dim=1)
    write_image(path, grid.detach().float().numpy())


def _due(step: int, every: int, last: int) -> bool:
    return step == last or (every > 0 and step % every == 0)


# stage 1

def train_stage1(config: TrainConfig, dataset, run_dir=None,
                 resume_from: Optional[str | Path] = None) -> TrainResult:
    """Fit G1 with Adam on L1 + lambda_bg1 * background loss."""
    enc = _encode(dataset, config)
    w = config.loss_weights
    torch.manual_seed(config.seed)
    g1 = GeneratorG1(config.profile, _image_size(config), config.width_divisor)
    opt = _adam(g1.parameters(), config)
    start = 0
    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        if payload["stage"] != 1:
            raise CheckpointError(f"{resume_from} is a stage-{payload['stage']} checkpoint")
        g1.load_state_dict(payload["networks"]["g1"]["state"])
        opt.load_state_dict(payload["optimizers"]["g1"])
        start = payload["step"]
    run_dir = _prepare_run_dir(run_dir, config, resume_from is not None)
    runlog = _RunLog(run_dir, STAGE1_COLUMNS, append=resume_from is not None)
    ckpt = None
    preview = enc.select(range(min(4, len(enc))))
    try:
        g1.train()
        for step in range(start, config.steps):
            x, p, y, m = batch_for_step(enc, config.batch_size, config.seed, step)
            y1 = g1(x, p)
            total, comps = stage1_loss(y, y1, m, w)
            vals = _check_finite(step, {"total": total, **comps})
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            done = step + 1
            runlog.add({"step": step, **vals}, write=_due(step, config.log_every, config.steps - 1))
            if run_dir is not None and config.checkpoint_every and done % config.checkpoint_every == 0:
                ckpt = save_checkpoint(run_dir / "checkpoints" / f"step_{done}.ckpt", stage=1, step=done,
                                       networks={"g1": g1}, optimizers={"g1": opt}, config=config)
            if run_dir is not None and (_due(done, config.sample_every, -1)
                                        or (config.checkpoint_every and done % config.checkpoint_every == 0)):
                _stage1_samples(run_dir / "samples" / f"step_{done}.png", g1, preview)
        if run_dir is not None:
            final = run_dir / "checkpoints" / f"step_{max(config.steps, start)}.ckpt"
            if ckpt != final:
                ckpt = save_checkpoint(final, stage=1, step=max(config.steps, start),
                                       networks={"g1": g1}, optimizers={"g1": opt}, config=config)
                _stage1_samples(run_dir / "samples" / f"step_{max(config.steps, start)}.png", g1, preview)
    finally:
        runlog.close()
    g1.eval()
    return TrainResult(ckpt, runlog.rows, {"g1": g1, "optimizer": opt})


def _stage1_samples(path: Path, g1, batch) -> None:
    x, p, y, _ = batch
    with torch.no_grad():
        y1 = g1(x, p)
    _write_grid(path, [[x[i], y[i], y1[i]] for i in range(len(x))])


# stage 2

def _frozen_g1(g1_checkpoint) -> GeneratorG1:
    if isinstance(g1_checkpoint, GeneratorG1):
        g1 = g1_checkpoint
    else:
        if g1_checkpoint is None:
            raise CheckpointError("stage 2 needs a stage-1 G1 checkpoint")
        g1 = restore_network(load_checkpoint(g1_checkpoint), "g1")
    g1.eval()
    for prm in g1.parameters():
        prm.requires_grad_(False)
    return g1


def build_stage2_networks(config: TrainConfig):
    torch.manual_seed(config.seed)
    h, w = _image_size(config)
    g2 = GeneratorG2(config.profile, (h, w), config.width_divisor)
    d1 = Discriminator(config.profile, (h, w), config.width_divisor)
    d2 = Discriminator(config.profile, (h // 2, w // 2), config.width_divisor)
    return g2, d1, d2


def train_stage2(config: TrainConfig, dataset, g1_checkpoint, run_dir=None,
                 resume_from: Optional[str | Path] = None) -> TrainResult:
    """Fit G2 against D1/D2 with G1 frozen; one D step then one G step per iteration."""
    enc = _encode(dataset, config)
    w: LossWeights = config.loss_weights
    adversarial = w.lambda_d1 + w.lambda_d2 > 0
    if not adversarial:
        log.warning("lambda_d1 = lambda_d2 = 0: stage 2 runs as supervised refinement only")
    g1 = _frozen_g1(g1_checkpoint)
    if tuple(g1.image_size) != _image_size(config) or g1.profile != config.profile:
        raise CheckpointError(f"G1 checkpoint is {g1.profile} {g1.image_size}, config is "
                              f"{config.profile} {_image_size(config)}")
    g1_hash = parameter_hash(g1)
    g2, d1, d2 = build_stage2_networks(config)
    opt_g = _adam(g2.parameters(), config)
    opt_d = _adam(list(d1.parameters()) + list(d2.parameters()), config)
    start = 0
    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        if payload["stage"] != 2:
            raise CheckpointError(f"{resume_from} is a stage-{payload['stage']} checkpoint")
        for key, net in (("g2", g2), ("d1", d1), ("d2", d2)):
            net.load_state_dict(payload["networks"][key]["state"])
        opt_g.load_state_dict(payload["optimizers"]["g2"])
        opt_d.load_state_dict(payload["optimizers"]["d"])
        start = payload["step"]
    run_dir = _prepare_run_dir(run_dir, config, resume_from is not None)
    runlog = _RunLog(run_dir, STAGE2_COLUMNS, append=resume_from is not None)
    w1, w2 = config.merge_weights
    nets = {"g1": g1, "g2": g2, "d1": d1, "d2": d2}
    preview = enc.select(range(min(4, len(enc))))

    def checkpoint(done: int) -> Path:
        return save_checkpoint(run_dir / "checkpoints" / f"step_{done}.ckpt", stage=2, step=done,
                               networks=nets, optimizers={"g2": opt_g, "d": opt_d}, config=config)

    ckpt = None
    try:
        g2.train()
        d1.train()
        d2.train()
        for step in range(start, config.steps):
            x, p, y, m = batch_for_step(enc, config.batch_size, config.seed, step)
            with torch.no_grad():
                y1 = g1(x, p)
            y_hat = merge(y1, g2(x, y1), w1, w2)

            full, half = scale_logits(d1, d2, x, y, y_hat.detach())
            _, d_total, _ = stage2_loss(full, half, y, y_hat.detach(), m, w, config.real_label)
            _check_finite(step, {"d_total": d_total})
            if adversarial:
                opt_d.zero_grad(set_to_none=True)
                d_total.backward()
                opt_d.step()

            for prm in (*d1.parameters(), *d2.parameters()):
                prm.requires_grad_(False)
            fake_full = d1(x, y_hat)
            fake_half = d2(downsample(x, 2), downsample(y_hat, 2))
            g_total, _, comps = stage2_loss(
                ScaleLogits(full.real.detach(), fake_full), ScaleLogits(half.real.detach(), fake_half),
                y, y_hat, m, w, config.real_label)
            for prm in (*d1.parameters(), *d2.parameters()):
                prm.requires_grad_(True)
            vals = _check_finite(step, {"g_total": g_total, "d_total": d_total, "g_adv": comps["g_adv"],
                                        "l1": comps["l1"], "bg": comps["bg"]})
            opt_g.zero_grad(set_to_none=True)
            g_total.backward()
            opt_g.step()

            done = step + 1
            runlog.add({"step": step, **vals}, write=_due(step, config.log_every, config.steps - 1))
            if run_dir is not None and config.checkpoint_every and done % config.checkpoint_every == 0:
                ckpt = checkpoint(done)
                _stage2_samples(run_dir / "samples" / f"step_{done}.png", g1, g2, preview, w1, w2)
            elif run_dir is not None and _due(done, config.sample_every, -1):
                _stage2_samples(run_dir / "samples" / f"step_{done}.png", g1, g2, preview, w1, w2)
        if run_dir is not None:
            last = max(config.steps, start)
            final = run_dir / "checkpoints" / f"step_{last}.ckpt"
            if ckpt != final:
                ckpt = checkpoint(last)
                _stage2_samples(run_dir / "samples" / f"step_{last}.png", g1, g2, preview, w1, w2)
    finally:
        runlog.close()
    if parameter_hash(g1) != g1_hash:
        raise RuntimeError("G1 parameters changed during stage 2")
    for net in (g2, d1, d2):
        net.eval()
    return TrainResult(ckpt, runlog.rows, {**nets, "opt_g": opt_g, "opt_d": opt_d})


def _stage2_samples(path: Path, g1, g2, batch, w1: float, w2: float) -> None:
    x, p, y, _ = batch
    with torch.no_grad():
        y1 = g1(x, p)
        y2 = g2(x, y1)
        y_hat = merge(y1, y2, w1, w2)
    _write_grid(path, [[x[i], y[i], y1[i], y2[i], y_hat[i]] for i in range(len(x))])


# evaluation and generation

def smoothed(values: Sequence[float], window: int = 10) -> tuple[float, float]:
    """Mean of the first and of the last ``window`` values."""
    v = np.asarray(values, dtype=np.float64)
    window = max(1, min(window, len(v)))
    return float(v[:window].mean()), float(v[-window:].mean())


def mean_image_baseline(enc: EncodedPairs) -> float:
    """L1 of predicting the per-pixel mean target for every record."""
    mean = enc.y.mean(dim=0, keepdim=True).expand_as(enc.y)
    return float(l1_loss(enc.y, mean))


@torch.no_grad()
def evaluate(enc: EncodedPairs, g1, g2=None, merge_weights=(1.0, 1.0),
             batch_size: int = 32) -> dict[str, float]:
    """Dataset-mean L1 and masked L1 of y1_hat (and of the merged image)."""
    sums: dict[str, float] = {}
    n = len(enc)
    for start in range(0, n, batch_size):
        x, p, y, m = enc.select(range(start, min(n, start + batch_size)))
        k = x.shape[0]
        y1 = g1(x, p)
        out = {"l1_coarse": l1_loss(y, y1), "masked_l1_coarse": background_loss(y, y1, m)}
        if g2 is not None:
            y_hat = merge(y1, g2(x, y1), *merge_weights)
            out["l1_final"] = l1_loss(y, y_hat)
            out["masked_l1_final"] = background_loss(y, y_hat, m)
        for key, v in out.items():
            sums[key] = sums.get(key, 0.0) + float(v) * k
    return {k: v / n for k, v in sums.items()}


def load_generators(checkpoints: Sequence[str | Path]):
    """``(g1, g2 or None)`` gathered from one or more checkpoints."""
    g1 = g2 = None
    for path in checkpoints:
        payload = load_checkpoint(path)
        nets = payload["networks"]
        if "g1" in nets and g1 is None:
            g1 = restore_network(payload, "g1")
        if "g2" in nets:
            g2 = restore_network(payload, "g2")
    if g1 is None:
        raise CheckpointError("no G1 network in the given checkpoints")
    for net in (g1, g2):
        if net is not None:
            net.eval()
    return g1, g2


@torch.no_grad()
def generate(g1: GeneratorG1, g2: Optional[GeneratorG2], cond_image, target_keypoints: KeypointSet,
             sigma: float, merge_weights=(1.0, 1.0)):
    """Full chain for one conditional image; returns ``(y1_hat, y2_hat, y_hat)`` as (3, H, W)."""
    x = torch.as_tensor(np.asarray(cond_image, dtype=np.float32))
    if tuple(x.shape[1:]) != tuple(g1.image_size):
        raise CheckpointError(f"checkpoint is for {g1.profile} {tuple(g1.image_size)} images, "
                              f"input is {tuple(x.shape[1:])}")
    if tuple(target_keypoints.image_size) != tuple(g1.image_size):
        raise CheckpointError(f"keypoints are for {target_keypoints.image_size}, "
                              f"checkpoint expects {tuple(g1.image_size)}")
    p = torch.from_numpy(encode_heatmaps(target_keypoints, sigma))
    y1 = g1(x, p)
    y2 = g2(x, y1) if g2 is not None else torch.zeros_like(y1)
    return y1, y2, merge(y1, y2, *merge_weights)
