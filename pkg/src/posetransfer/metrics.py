"""SSIM, Inception Score and their masked variants, plus report tables.

Images enter as ``(C, H, W)`` arrays in [-1, 1] and are mapped to [0, 1]
before any metric is computed.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DEFAULT_SPLITS = 10

# image in [-1, 1] -> probability vector
ClassifierProbe = Callable[[np.ndarray], np.ndarray]


class MetricError(ValueError):
    pass


def to_unit_range(img) -> np.ndarray:
    return (np.asarray(img, dtype=np.float64) + 1.0) / 2.0


def gaussian_window_1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable weighted mean over every fully-contained window."""
    r = len(g) // 2
    out = correlate1d(img, g, axis=-2, mode="constant")
    out = correlate1d(out, g, axis=-1, mode="constant")
    return out[..., r:img.shape[-2] - r, r:img.shape[-1] - r]


def ssim_map(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> np.ndarray:
    """Local SSIM for ``(C, H, W)`` images already in [0, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"ssim: shapes {a.shape} and {b.shape} differ")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise MetricError(f"ssim: images {a.shape[-2:]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window_1d()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    va = _filter_valid(a * a, g) - mu_a ** 2
    vb = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2)
    return num / den


def ssim(a, b) -> float:
    """Mean SSIM of two [-1, 1] images, averaged over windows and channels."""
    return float(ssim_map(to_unit_range(a), to_unit_range(b)).mean())


def _mask_unit(img, mask) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float64)
    while m.ndim > 2 and m.shape[0] == 1:
        m = m[0]
    return to_unit_range(img) * m


def mask_ssim(a, b, mask) -> float:
    """SSIM after zeroing the background of both images."""
    a_u, b_u = _mask_unit(a, mask), _mask_unit(b, mask)
    return float(ssim_map(a_u, b_u).mean())


def _probabilities(images: Sequence, probe: ClassifierProbe) -> np.ndarray:
    if len(images) == 0:
        raise MetricError("inception score of an empty image set")
    probs = np.stack([np.asarray(probe(img), dtype=np.float64) for img in images])
    if probs.ndim != 2:
        raise MetricError(f"probe must return 1-D distributions, got shape {probs.shape[1:]}")
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
        raise MetricError("probe outputs are not probability distributions")
    return probs


def score_from_probabilities(probs: np.ndarray, splits: int = DEFAULT_SPLITS) -> tuple[float, float]:
    """``exp(mean_i KL(p(y|x_i) || p(y)))`` per split; mean and std over splits."""
    probs = np.asarray(probs, dtype=np.float64)
    if splits < 1 or len(probs) < splits:
        raise MetricError(f"need at least {splits} images for {splits} splits, got {len(probs)}")
    scores = []
    for part in np.array_split(probs, splits):
        marginal = part.mean(axis=0, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(part > 0, part * (np.log(part) - np.log(marginal)), 0.0)
        scores.append(np.exp(terms.sum(axis=1).mean()))
    return float(np.mean(scores)), float(np.std(scores))


def inception_score(images: Sequence, probe: ClassifierProbe,
                    splits: int = DEFAULT_SPLITS) -> tuple[float, float]:
    return score_from_probabilities(_probabilities(images, probe), splits)


def mask_is(images: Sequence, masks: Sequence, probe: ClassifierProbe,
            splits: int = DEFAULT_SPLITS) -> tuple[float, float]:
    """Inception score of background-zeroed images.

    Masking happens in [0, 1] space (background becomes black), and the
    result is mapped back to [-1, 1] for the probe.
    """
    if len(images) != len(masks):
        raise MetricError(f"{len(images)} images but {len(masks)} masks")
    masked = [2.0 * _mask_unit(img, m) - 1.0 for img, m in zip(images, masks)]
    return inception_score(masked, probe, splits)


class PaletteProbe:
    """Analytic probe: soft assignment of pixel colours to a fixed palette.

    The distribution is the average over pixels of a softmax over negative
    squared distances to each palette colour, so a constant image always
    maps to the same vector.
    """

    def __init__(self, palette: np.ndarray, temperature: float = 0.01):
        self.palette = np.asarray(palette, dtype=np.float64).reshape(-1, 3)
        self.temperature = temperature

    def __call__(self, img) -> np.ndarray:
        px = to_unit_range(img).reshape(3, -1).T
        d2 = ((px[:, None, :] - self.palette[None]) ** 2).sum(-1)
        logits = -d2 / self.temperature
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=1, keepdims=True)
        p = w.mean(axis=0)
        return p / p.sum()


class TorchClassifierProbe:
    """Adapter turning a torch classifier returning logits into a probe."""

    def __init__(self, model, input_size: Optional[tuple[int, int]] = None):
        import torch

        self.model = model.eval()
        self.input_size = input_size
        self._torch = torch

    def __call__(self, img) -> np.ndarray:
        torch = self._torch
        x = torch.as_tensor(np.asarray(img, dtype=np.float32))[None]
        if self.input_size is not None:
            x = torch.nn.functional.interpolate(x, size=self.input_size, mode="bilinear",
                                                align_corners=False)
        with torch.no_grad():
            logits = self.model(x)
        return torch.softmax(logits.double(), dim=1)[0].numpy()


@dataclass
class MetricReport:
    profile: str
    values: dict[str, tuple[float, float, int]] = field(default_factory=dict)  # name -> (value, std, n)
    per_image_ssim: dict[str, float] = field(default_factory=dict)

    COLUMNS = ("SSIM", "IS", "mask-SSIM", "mask-IS")

    def rows(self) -> list[dict]:
        return [{"metric": k, "value": self.values[k][0], "std": self.values[k][1],
                 "n": self.values[k][2]} for k in self.COLUMNS if k in self.values]

    def to_json(self) -> str:
        return json.dumps({"profile": self.profile, "metrics": self.rows(),
                           "per_image_ssim": self.per_image_ssim}, indent=2)

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["metric", "value", "std", "n"])
            writer.writeheader()
            writer.writerows(self.rows())
        (out / "report.json").write_text(self.to_json() + "\n")


def make_report(generated_dir, target_dir, annotations, probe: ClassifierProbe,
                profile: str = "market", splits: int = DEFAULT_SPLITS,
                dilate_radius: Optional[int] = None) -> MetricReport:
    """Compare same-named PNGs in two directories and compute all four metrics.

    ``annotations`` maps target filenames to :class:`KeypointSet` (or is a path
    to an annotation file); it supplies the masks for the masked variants.
    """
    from .data import read_image
    from .pose import DEFAULT_DILATE_RADIUS, build_pose_mask, read_annotations

    gen_dir, tgt_dir = Path(generated_dir), Path(target_dir)
    gen = sorted(p.name for p in gen_dir.glob("*.png"))
    tgt = sorted(p.name for p in tgt_dir.glob("*.png"))
    if not gen and not tgt:
        raise MetricError(f"no images in {gen_dir} or {tgt_dir}")
    unmatched = sorted(set(gen) ^ set(tgt))
    if unmatched:
        raise MetricError(f"unmatched files: {unmatched[:10]}{' ...' if len(unmatched) > 10 else ''}")
    images = {n: (read_image(gen_dir / n), read_image(tgt_dir / n)) for n in gen}
    shape = next(iter(images.values()))[1].shape
    if not isinstance(annotations, dict):
        annotations = read_annotations(annotations, tuple(shape[1:]))
    missing = [n for n in gen if n not in annotations]
    if missing:
        raise MetricError(f"no keypoints for: {missing[:10]}")
    radius = DEFAULT_DILATE_RADIUS if dilate_radius is None else dilate_radius

    report = MetricReport(profile)
    masks = {n: build_pose_mask(annotations[n], radius) for n in gen}
    per_ssim = [ssim(*images[n]) for n in gen]
    per_mssim = [mask_ssim(images[n][0], images[n][1], masks[n]) for n in gen]
    report.per_image_ssim = dict(zip(gen, per_ssim))
    n = len(gen)
    s = min(splits, n)
    report.values["SSIM"] = (float(np.mean(per_ssim)), float(np.std(per_ssim)), n)
    report.values["IS"] = (*inception_score([images[k][0] for k in gen], probe, s), n)
    report.values["mask-SSIM"] = (float(np.mean(per_mssim)), float(np.std(per_mssim)), n)
    report.values["mask-IS"] = (*mask_is([images[k][0] for k in gen],
                                         [masks[k] for k in gen], probe, s), n)
    return report
