"""Keypoint sets, heatmap encoding, pose masks and downsampling.

Keypoints follow the 18-joint OpenPose/COCO ordering.  Coordinates are
pixel floats with ``x`` along the width and ``y`` along the height.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from scipy import ndimage
from skimage.draw import line as draw_line
from skimage.draw import polygon as draw_polygon
from skimage.morphology import disk

JOINT_NAMES = (
    "nose", "neck",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle",
    "r_eye", "l_eye", "r_ear", "l_ear",
)
NUM_JOINTS = len(JOINT_NAMES)

SKELETON_EDGES = (
    (1, 2), (2, 3), (3, 4),
    (1, 5), (5, 6), (6, 7),
    (1, 8), (8, 9), (9, 10),
    (1, 11), (11, 12), (12, 13),
    (1, 0), (0, 14), (14, 16), (0, 15), (15, 17),
)
# neck, shoulders, hips
TORSO_JOINTS = (1, 2, 5, 11, 8)

DEFAULT_SIGMA = 4.0
DEFAULT_DILATE_RADIUS = 10


class KeypointError(ValueError):
    pass


@dataclass(frozen=True)
class KeypointSet:
    """18 keypoints as an ``(18, 3)`` array of ``(x, y, visible)`` rows."""

    points: np.ndarray
    image_size: tuple[int, int]  # (height, width)

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (NUM_JOINTS, 3):
            raise KeypointError(
                f"expected {NUM_JOINTS} keypoints with (x, y, visible), got shape {pts.shape}"
            )
        h, w = self.image_size
        vis = pts[:, 2] > 0
        xs, ys = pts[vis, 0], pts[vis, 1]
        if np.any(xs < 0) or np.any(xs >= w) or np.any(ys < 0) or np.any(ys >= h):
            bad = [JOINT_NAMES[i] for i in np.flatnonzero(vis)
                   if not (0 <= pts[i, 0] < w and 0 <= pts[i, 1] < h)]
            raise KeypointError(f"visible keypoints out of bounds for {h}x{w} image: {bad}")
        pts = pts.copy()
        pts[~vis] = (-1.0, -1.0, 0.0)
        pts[vis, 2] = 1.0
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "image_size", (int(h), int(w)))

    @classmethod
    def from_coords(cls, coords: Sequence[tuple[float, float] | None],
                    image_size: tuple[int, int]) -> "KeypointSet":
        """Build from ``(x, y)`` pairs; ``None`` marks a missing joint."""
        rows = [(-1.0, -1.0, 0.0) if c is None else (float(c[0]), float(c[1]), 1.0)
                for c in coords]
        return cls(np.array(rows, dtype=np.float64).reshape(-1, 3), image_size)

    @property
    def visible(self) -> np.ndarray:
        return self.points[:, 2] > 0

    def pixel(self, j: int) -> tuple[int, int]:
        """Nearest pixel ``(row, col)`` of joint ``j``."""
        r, c = _nearest_pixels(self)[j]
        return int(r), int(c)

    def shifted(self, dy: float, dx: float) -> "KeypointSet":
        pts = np.array(self.points)
        vis = pts[:, 2] > 0
        pts[vis, 0] += dx
        pts[vis, 1] += dy
        return KeypointSet(pts, self.image_size)


def _nearest_pixels(kps: KeypointSet) -> np.ndarray:
    h, w = kps.image_size
    rc = np.floor(kps.points[:, [1, 0]] + 0.5).astype(np.int64)
    # x just below w can round up to w
    rc[:, 0] = np.clip(rc[:, 0], 0, h - 1)
    rc[:, 1] = np.clip(rc[:, 1], 0, w - 1)
    return rc


def encode_heatmaps(kps: KeypointSet, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Encode keypoints as an ``(18, H, W)`` float32 stack of Gaussian bumps.

    Each bump is centered on the keypoint's nearest pixel with peak value 1
    and is cut to 0 beyond ``3 * sigma``.  Invisible joints give zero channels.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    h, w = kps.image_size
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    out = np.zeros((NUM_JOINTS, h, w), dtype=np.float32)
    centers = _nearest_pixels(kps)
    cutoff = (3.0 * sigma) ** 2
    for j in np.flatnonzero(kps.visible):
        r0, c0 = centers[j]
        d2 = (rows - r0) ** 2 + (cols - c0) ** 2
        g = np.exp(-d2 / (2.0 * sigma * sigma))
        g[d2 > cutoff] = 0.0
        out[j] = g
    return out


def build_pose_mask(kps: KeypointSet, dilate_radius: int = DEFAULT_DILATE_RADIUS) -> np.ndarray:
    """Binary ``(H, W)`` uint8 person mask from the skeleton.

    Skeleton segments and joint pixels are rasterized, dilated with a disk of
    ``dilate_radius``, and united with the filled torso polygon.
    """
    if dilate_radius < 1:
        raise ValueError(f"dilate_radius must be >= 1, got {dilate_radius}")
    vis = kps.visible
    if not vis.any():
        raise KeypointError("pose mask undefined: no visible keypoints")
    h, w = kps.image_size
    centers = _nearest_pixels(kps)
    skel = np.zeros((h, w), dtype=bool)
    skel[centers[vis, 0], centers[vis, 1]] = True
    for a, b in SKELETON_EDGES:
        if vis[a] and vis[b]:
            rr, cc = draw_line(centers[a, 0], centers[a, 1], centers[b, 0], centers[b, 1])
            skel[rr, cc] = True
    mask = ndimage.binary_dilation(skel, structure=disk(dilate_radius))
    torso = [j for j in TORSO_JOINTS if vis[j]]
    if len(torso) >= 3:
        rr, cc = draw_polygon(centers[torso, 0], centers[torso, 1], shape=(h, w))
        mask[rr, cc] = True
    return mask.astype(np.uint8)


def downsample(img: torch.Tensor, factor: int) -> torch.Tensor:
    """Average-pool ``(..., C, H, W)`` over non-overlapping ``factor`` squares."""
    if factor < 1 or int(factor) != factor:
        raise ValueError(f"factor must be a positive integer, got {factor}")
    h, w = img.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"image size {h}x{w} not divisible by {factor}")
    if factor == 1:
        return img
    squeeze = img.dim() == 3
    x = img.unsqueeze(0) if squeeze else img
    out = torch.nn.functional.avg_pool2d(x, factor)
    return out.squeeze(0) if squeeze else out


# annotation files

def annotation_header() -> list[str]:
    cols = ["image"]
    for name in JOINT_NAMES:
        cols += [f"{name}_x", f"{name}_y", f"{name}_v"]
    return cols


def write_annotations(path: str | Path, rows: Iterable[tuple[str, KeypointSet]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(annotation_header())
        for name, kps in rows:
            flat = [name]
            for x, y, v in kps.points:
                if v > 0:
                    flat += [repr(float(x)), repr(float(y)), "1"]
                else:
                    flat += ["-1", "-1", "0"]
            writer.writerow(flat)


def read_annotations(path: str | Path, image_size: tuple[int, int]) -> dict[str, KeypointSet]:
    """Parse an annotation file into ``{image filename: KeypointSet}``."""
    out: dict[str, KeypointSet] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return out
        if header != annotation_header():
            raise KeypointError(f"{path}: unexpected annotation header")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 1 + 3 * NUM_JOINTS:
                raise KeypointError(f"{path}:{lineno}: expected {1 + 3 * NUM_JOINTS} fields, got {len(row)}")
            try:
                pts = np.array([float(v) for v in row[1:]], dtype=np.float64).reshape(NUM_JOINTS, 3)
                out[row[0]] = KeypointSet(pts, image_size)
            except (ValueError, KeypointError) as exc:
                raise KeypointError(f"{path}:{lineno} ({row[0]}): {exc}") from exc
    return out
