"""Pair datasets on disk and the procedural toy-figure generator.

Layout::

    root/images/*.png
    root/annotations.csv   # one keypoint row per image
    root/pairs.csv         # header ``cond,target``
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .pose import (
    DEFAULT_DILATE_RADIUS, DEFAULT_SIGMA, NUM_JOINTS, KeypointError, KeypointSet,
    build_pose_mask, encode_heatmaps, read_annotations, write_annotations,
)

log = logging.getLogger(__name__)

# Torso colours double as appearance classes for the palette probe.
TORSO_PALETTE = np.array([
    (220, 40, 40), (40, 160, 60), (40, 80, 220), (230, 200, 40),
    (170, 60, 200), (40, 200, 210), (240, 130, 30),
], dtype=np.uint8)


class DatasetError(ValueError):
    pass


def normalize(img_u8: np.ndarray) -> np.ndarray:
    """``(H, W, 3)`` uint8 -> ``(3, H, W)`` float32 in [-1, 1]."""
    return (2.0 * np.asarray(img_u8, dtype=np.float32).transpose(2, 0, 1) / 255.0 - 1.0).astype(np.float32)


def denormalize(img) -> np.ndarray:
    """``(3, H, W)`` in [-1, 1] -> ``(H, W, 3)`` uint8."""
    a = np.asarray(img, dtype=np.float64)
    return np.clip(np.rint((a + 1.0) * 127.5), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def read_image(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc
    return normalize(arr)


def write_image(path: str | Path, img) -> None:
    Image.fromarray(denormalize(img)).save(path, format="PNG")


@dataclass(frozen=True)
class PairRecord:
    cond_image_path: Path
    target_image_path: Path
    target_keypoints: KeypointSet
    cond_keypoints: Optional[KeypointSet] = None


def read_pairs(path: str | Path) -> list[tuple[str, str]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if [h.strip() for h in header] != ["cond", "target"]:
            raise DatasetError(f"{path}: header must be 'cond,target', got {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise DatasetError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            rows.append((row[0].strip(), row[1].strip()))
        return rows


def load_dataset(root: str | Path, pairs_file: str | Path = "pairs.csv",
                 image_size: Optional[tuple[int, int]] = None,
                 annotations_file: str | Path = "annotations.csv") -> list[PairRecord]:
    """Validated pair records in pairs-file order.

    ``image_size`` defaults to the size of the first referenced image; every
    image must match it.
    """
    root = Path(root)
    pairs_path = root / pairs_file
    if not pairs_path.exists():
        raise DatasetError(f"pairs file not found: {pairs_path}")
    pairs = read_pairs(pairs_path)
    if not pairs:
        return []
    images = root / "images"
    sizes: dict[str, tuple[int, int]] = {}

    def size_of(lineno: int, name: str) -> tuple[int, int]:
        if name not in sizes:
            path = images / name
            if not path.exists():
                raise DatasetError(f"{pairs_path}:{lineno}: missing image {path}")
            try:
                with Image.open(path) as im:
                    w, h = im.size
                    bands = len(im.getbands())
            except OSError as exc:
                raise DatasetError(f"{pairs_path}:{lineno}: unreadable image {path}: {exc}") from exc
            if bands != 3:
                raise DatasetError(f"{pairs_path}:{lineno}: {name} has {bands} channels, expected 3")
            sizes[name] = (h, w)
        return sizes[name]

    expected = tuple(image_size) if image_size else size_of(2, pairs[0][0])
    try:
        kps = read_annotations(root / annotations_file, expected)
    except FileNotFoundError as exc:
        raise DatasetError(f"annotation file not found: {root / annotations_file}") from exc
    except KeypointError as exc:
        raise DatasetError(str(exc)) from exc
    records = []
    for lineno, (cond, target) in enumerate(pairs, start=2):
        for name in (cond, target):
            if size_of(lineno, name) != expected:
                raise DatasetError(f"{pairs_path}:{lineno}: {name} is {sizes[name]}, expected {expected}")
        if target not in kps:
            raise DatasetError(f"{pairs_path}:{lineno}: no keypoints for target {target}")
        records.append(PairRecord(images / cond, images / target, kps[target], kps.get(cond)))
    return records


# toy figures

@dataclass(frozen=True)
class ToyAppearance:
    background: tuple[int, int, int]
    torso_class: int
    arm_color: tuple[int, int, int]
    leg_color: tuple[int, int, int]
    skin_color: tuple[int, int, int]

    @property
    def torso_color(self) -> tuple[int, int, int]:
        return tuple(int(c) for c in TORSO_PALETTE[self.torso_class])

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "ToyAppearance":
        def color(lo=0, hi=256):
            return tuple(int(v) for v in rng.integers(lo, hi, size=3))

        return cls(background=color(0, 120), torso_class=int(rng.integers(len(TORSO_PALETTE))),
                   arm_color=color(60, 256), leg_color=color(60, 256), skin_color=color(150, 256))


@dataclass(frozen=True)
class ToyPose:
    """Joint angles in radians, measured from straight down."""

    center_dx: float
    lean: float
    head_tilt: float
    shoulder: tuple[float, float]  # right, left
    elbow: tuple[float, float]
    hip: tuple[float, float]
    knee: tuple[float, float]

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "ToyPose":
        u = rng.uniform
        return cls(
            center_dx=u(-0.06, 0.06), lean=u(-0.12, 0.12), head_tilt=u(-0.3, 0.3),
            shoulder=(u(0.1, 2.6), u(0.1, 2.6)), elbow=(u(-1.6, 1.6), u(-1.6, 1.6)),
            hip=(u(0.0, 0.5), u(0.0, 0.5)), knee=(u(-0.9, 0.2), u(-0.9, 0.2)),
        )


def _rot(v: np.ndarray, a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def toy_keypoints(pose: ToyPose, canvas: tuple[int, int]) -> np.ndarray:
    """Analytic skeleton; ``(18, 2)`` integer-valued pixel coordinates (x, y)."""
    h, w = canvas
    u = h / 64.0
    down = np.array([0.0, 1.0])
    neck = np.array([w / 2.0 + pose.center_dx * w, 14 * u])
    # +x is image-right; the figure faces the viewer, so its right side is image-left
    side = {"r": -1.0, "l": 1.0}
    pts = np.zeros((NUM_JOINTS, 2))
    pts[1] = neck
    torso_dir = _rot(down, pose.lean)
    pts[0] = neck + _rot(np.array([0.0, -6 * u]), pose.head_tilt)
    head_right = _rot(np.array([1.0, 0.0]), pose.head_tilt)
    head_up = _rot(np.array([0.0, -1.0]), pose.head_tilt)
    for i, (eye, ear, s) in enumerate(((14, 16, side["r"]), (15, 17, side["l"]))):
        pts[eye] = pts[0] + s * 1.5 * u * head_right + 1.5 * u * head_up
        pts[ear] = pts[0] + s * 3.0 * u * head_right
    for k, (sh, el, wr, hp, kn, an) in enumerate(((2, 3, 4, 8, 9, 10), (5, 6, 7, 11, 12, 13))):
        s = side["r"] if k == 0 else side["l"]
        pts[sh] = neck + _rot(np.array([s * 5 * u, 1 * u]), pose.lean)
        upper = _rot(down, -s * pose.shoulder[k])
        pts[el] = pts[sh] + 8 * u * upper
        pts[wr] = pts[el] + 7 * u * _rot(upper, -s * pose.elbow[k])
        pts[hp] = neck + 19 * u * torso_dir + _rot(np.array([s * 3 * u, 0.0]), pose.lean)
        thigh = _rot(down, -s * pose.hip[k])
        pts[kn] = pts[hp] + 11 * u * thigh
        pts[an] = pts[kn] + 10 * u * _rot(thigh, -s * pose.knee[k])
    return np.floor(pts + 0.5)


def _capsule(canvas: np.ndarray, a, b, radius: float, color) -> None:
    h, w = canvas.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    p = np.stack([xx, yy], axis=-1).astype(np.float64)
    a, b = np.asarray(a, float), np.asarray(b, float)
    ab = b - a
    denom = float(ab @ ab)
    t = np.zeros((h, w)) if denom == 0 else np.clip(((p - a) @ ab) / denom, 0.0, 1.0)
    d2 = ((p - (a + t[..., None] * ab)) ** 2).sum(-1)
    canvas[d2 <= radius * radius] = color


def _polygon(canvas: np.ndarray, pts: np.ndarray, color) -> None:
    from skimage.draw import polygon

    rr, cc = polygon(pts[:, 1], pts[:, 0], shape=canvas.shape[:2])
    canvas[rr, cc] = color


def render_toy(appearance: ToyAppearance, keypoints: np.ndarray, canvas: tuple[int, int]) -> np.ndarray:
    """Render a stick figure as ``(H, W, 3)`` uint8."""
    h, w = canvas
    u = h / 64.0
    img = np.empty((h, w, 3), dtype=np.uint8)
    img[:] = appearance.background
    k = keypoints
    limb = 1.6 * u
    for a, b in ((8, 9), (9, 10), (11, 12), (12, 13)):
        _capsule(img, k[a], k[b], limb, appearance.leg_color)
    _polygon(img, k[[2, 5, 11, 8]], appearance.torso_color)
    _capsule(img, k[1], (k[8] + k[11]) / 2, 2.5 * u, appearance.torso_color)
    _capsule(img, k[0], k[1], 1.2 * u, appearance.skin_color)
    _capsule(img, k[0], k[0], 3.2 * u, appearance.skin_color)
    for a, b in ((2, 3), (3, 4), (5, 6), (6, 7)):
        _capsule(img, k[a], k[b], limb, appearance.arm_color)
    return img


def _sample_pose(rng: np.random.Generator, canvas: tuple[int, int], margin: int = 1,
                 tries: int = 1000) -> np.ndarray:
    h, w = canvas
    for _ in range(tries):
        pts = toy_keypoints(ToyPose.sample(rng), canvas)
        if (pts[:, 0].min() >= margin and pts[:, 0].max() <= w - 1 - margin
                and pts[:, 1].min() >= margin and pts[:, 1].max() <= h - 1 - margin):
            return pts
    raise RuntimeError(f"could not place a toy figure on a {h}x{w} canvas")


def generate_toy_dataset(root: str | Path, n_pairs: int, canvas: tuple[int, int] = (64, 32),
                         seed: int = 0) -> list[tuple[str, str]]:
    """Write ``n_pairs`` (cond, target) renders of shared appearances in two poses."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    root = Path(root)
    images = root / "images"
    try:
        images.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create dataset directory {root}: {exc}") from exc
    rng = np.random.default_rng(seed)
    annotations = []
    pairs = []
    labels = []
    for i in range(n_pairs):
        appearance = ToyAppearance.sample(rng)
        names = []
        for role in ("c", "t"):
            pts = _sample_pose(rng, canvas)
            img = render_toy(appearance, pts, canvas)
            name = f"pair{i:05d}_{role}.png"
            Image.fromarray(img).save(images / name, format="PNG")
            kps = KeypointSet(np.column_stack([pts, np.ones(NUM_JOINTS)]), canvas)
            if role == "t":
                # ground truth by construction: target is the cond appearance in the target pose
                reread = np.asarray(Image.open(images / name).convert("RGB"))
                assert np.array_equal(reread, render_toy(appearance, kps.points[:, :2], canvas))
            annotations.append((name, kps))
            names.append(name)
        pairs.append((names[0], names[1]))
        labels.append((names[0], names[1], appearance.torso_class))
    write_annotations(root / "annotations.csv", annotations)
    with open(root / "pairs.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cond", "target"])
        writer.writerows(pairs)
    with open(root / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cond", "target", "torso_class"])
        writer.writerows(labels)
    log.info("wrote %d toy pairs to %s", n_pairs, root)
    return pairs


# batching

@dataclass
class EncodedPairs:
    """All records decoded into tensors: x, p, y ``(N, C, H, W)``, mask ``(N, 1, H, W)``."""

    x: torch.Tensor
    p: torch.Tensor
    y: torch.Tensor
    mask: torch.Tensor

    def __len__(self) -> int:
        return self.x.shape[0]

    def select(self, idx) -> tuple[torch.Tensor, ...]:
        idx = torch.as_tensor(idx, dtype=torch.long)
        return self.x[idx], self.p[idx], self.y[idx], self.mask[idx]


def encode_records(records: Sequence[PairRecord], sigma: float = DEFAULT_SIGMA,
                   dilate_radius: int = DEFAULT_DILATE_RADIUS) -> EncodedPairs:
    if not records:
        raise DatasetError("no records to encode")
    xs, ps, ys, ms = [], [], [], []
    for r in records:
        xs.append(read_image(r.cond_image_path))
        ys.append(read_image(r.target_image_path))
        ps.append(encode_heatmaps(r.target_keypoints, sigma))
        ms.append(build_pose_mask(r.target_keypoints, dilate_radius)[None].astype(np.float32))
    return EncodedPairs(*(torch.from_numpy(np.stack(a)) for a in (xs, ps, ys, ms)))


def epoch_order(n: int, shuffle_seed: Optional[int], epoch: int = 0) -> np.ndarray:
    if shuffle_seed is None:
        return np.arange(n)
    return np.random.default_rng([shuffle_seed, epoch]).permutation(n)


def batch_iterator(records: Sequence[PairRecord] | EncodedPairs, batch_size: int,
                   shuffle_seed: Optional[int] = None, epoch: int = 0,
                   sigma: float = DEFAULT_SIGMA,
                   dilate_radius: int = DEFAULT_DILATE_RADIUS) -> Iterator[tuple[torch.Tensor, ...]]:
    """One epoch of ``(x, p, y, mask)`` batches in seed-determined order."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    enc = records if isinstance(records, EncodedPairs) else encode_records(records, sigma, dilate_radius)
    order = epoch_order(len(enc), shuffle_seed, epoch)
    for start in range(0, len(order), batch_size):
        yield enc.select(order[start:start + batch_size])


def batch_for_step(enc: EncodedPairs, batch_size: int, shuffle_seed: int, step: int):
    """The batch consumed at global training ``step`` (epochs wrap deterministically)."""
    per_epoch = math.ceil(len(enc) / batch_size)
    epoch, k = divmod(step, per_epoch)
    order = epoch_order(len(enc), shuffle_seed, epoch)
    return enc.select(order[k * batch_size:(k + 1) * batch_size])
