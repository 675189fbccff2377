"""Evaluation metrics: SSIM, FID, perceptual distance, identity similarity.

FID and the perceptual distance run on a frozen, seeded surrogate feature
network instead of a pretrained classifier, so their values are comparable
only between reports that carry the same ``feature_extractor_id``.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, ContractError, DimensionError, NumericError
from .experts import ExpertConfig, get_experts
from .synthfaces import load_image_folder

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
EIG_FLOOR = 1e-10
DEFAULT_EXTRACTOR = "surrogate64"


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    x = torch.as_tensor(x)
    if x.ndim == 3:
        x = x.unsqueeze(0)
    if x.ndim != 4:
        raise DimensionError(f"expected [3, H, W] or [B, 3, H, W], got {tuple(x.shape)}")
    return x.to(torch.float64)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    r = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(r**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    """Mean Gaussian-windowed SSIM of images in [-1, 1] (mapped to [0, 1])."""
    a, b = _as_batch(a), _as_batch(b)
    if a.shape != b.shape:
        raise DimensionError(f"ssim: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ContractError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    a, b = (a + 1) / 2, (b + 1) / 2
    c = a.shape[1]
    w = _gaussian_window().expand(c, 1, -1, -1)

    def filt(x):
        return F.conv2d(x, w, groups=c)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float((num / den).mean())


# -- Frechet distance -------------------------------------------------------


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    m = (m + m.T) / 2
    w, v = np.linalg.eigh(m)
    w = np.where(w < EIG_FLOOR, 0.0, w)
    return (v * np.sqrt(w)) @ v.T


def _stats(f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = f.mean(0)
    if f.shape[0] < 2:
        return mu, np.zeros((f.shape[1], f.shape[1]))
    return mu, np.cov(f, rowvar=False, ddof=1).reshape(f.shape[1], f.shape[1])


def fid(features_real, features_gen) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    Covariances are unbiased; a set with a single row contributes a zero
    covariance. Eigenvalues below 1e-10 are treated as zero when taking
    matrix square roots.
    """
    fr = np.asarray(features_real, dtype=np.float64)
    fg = np.asarray(features_gen, dtype=np.float64)
    if fr.ndim != 2 or fg.ndim != 2 or fr.shape[1] != fg.shape[1]:
        raise DimensionError(f"fid: feature shapes {fr.shape} and {fg.shape} are incompatible")
    if fr.shape[0] == 0 or fg.shape[0] == 0:
        raise ContractError("fid: empty feature set")
    if not (np.isfinite(fr).all() and np.isfinite(fg).all()):
        raise NumericError("fid: non-finite features")
    mu_r, cov_r = _stats(fr)
    mu_g, cov_g = _stats(fg)
    root_r = _sqrt_psd(cov_r)
    cross = np.linalg.eigvalsh(root_r @ cov_g @ root_r)
    tr_cross = float(np.sqrt(np.where(cross < EIG_FLOOR, 0.0, cross)).sum())
    diff = mu_r - mu_g
    value = float(diff @ diff + np.trace(cov_r) + np.trace(cov_g) - 2 * tr_cross)
    return max(value, 0.0)


# -- surrogate feature network ---------------------------------------------


class SurrogateExtractor:
    """Three seeded conv layers; features are pooled means and deviations."""

    def __init__(self, seed: int, dim: int = 64, widths=(16, 32, 32)):
        self.seed, self.dim = seed, dim
        g = torch.Generator().manual_seed(seed)
        self.convs = []
        cin = 3
        for c in widths:
            w = torch.randn(c, cin, 3, 3, generator=g, dtype=torch.float64) / math.sqrt(cin * 9)
            self.convs.append(w)
            cin = c
        pooled = 2 * sum(widths)
        self.proj = torch.randn(pooled, dim, generator=g, dtype=torch.float64) / math.sqrt(pooled)

    def layers(self, x: torch.Tensor) -> list[torch.Tensor]:
        h = _as_batch(x)
        out = []
        for i, w in enumerate(self.convs):
            h = torch.tanh(F.conv2d(h, w, padding=1, stride=1 if i == 0 else 2))
            out.append(h)
        return out

    def features(self, x: torch.Tensor) -> torch.Tensor:
        pooled = []
        for h in self.layers(x):
            pooled += [h.mean((2, 3)), h.std((2, 3))]
        return torch.cat(pooled, 1) @ self.proj


EXTRACTORS = {DEFAULT_EXTRACTOR: lambda: SurrogateExtractor(seed=20240, dim=64)}


@lru_cache(maxsize=None)
def get_extractor(extractor_id: str = DEFAULT_EXTRACTOR) -> SurrogateExtractor:
    if extractor_id not in EXTRACTORS:
        raise ConfigError(f"unknown feature extractor {extractor_id!r}; available: {', '.join(sorted(EXTRACTORS))}")
    return EXTRACTORS[extractor_id]()


def extract_features(images, extractor_id: str = DEFAULT_EXTRACTOR) -> np.ndarray:
    """[N, D] feature matrix, one row per image, computed image by image."""
    ex = get_extractor(extractor_id)
    rows = [ex.features(img)[0] for img in images]
    if not rows:
        return np.zeros((0, ex.dim))
    return torch.stack(rows).numpy()


def perceptual_distance(a: torch.Tensor, b: torch.Tensor, extractor_id: str = DEFAULT_EXTRACTOR) -> float:
    """Mean over layers of the spatially averaged squared distance between
    channel-normalized activations."""
    a, b = _as_batch(a), _as_batch(b)
    if a.shape != b.shape:
        raise DimensionError(f"perceptual_distance: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")
    ex = get_extractor(extractor_id)
    total = 0.0
    la, lb = ex.layers(a), ex.layers(b)
    for fa, fb in zip(la, lb):
        fa = fa / (fa.norm(dim=1, keepdim=True) + 1e-10)
        fb = fb / (fb.norm(dim=1, keepdim=True) + 1e-10)
        total += float(((fa - fb) ** 2).sum(1).mean())
    return total / len(la)


def identity_similarity(a: torch.Tensor, b: torch.Tensor, cfg: ExpertConfig | None = None) -> float:
    """Cosine between surrogate identity embeddings of two images."""
    ex = get_experts(cfg or ExpertConfig())
    ea = ex.encode_identity(_as_batch(a))[0]
    eb = ex.encode_identity(_as_batch(b))[0]
    return float((ea @ eb) / (ea.norm() * eb.norm()))


# -- batch evaluation -------------------------------------------------------


@dataclass
class MetricsReport:
    values: dict[str, float]
    n_samples: dict[str, int]
    feature_extractor_id: str
    config_digest: str
    per_pair: list[dict] = field(default_factory=list)

    def check(self) -> None:
        for k, v in self.values.items():
            if not math.isfinite(v):
                raise NumericError(f"metric {k} is not finite")
            if self.n_samples.get(k, 0) < 1:
                raise ContractError(f"metric {k} has no samples")

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "report.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value", "n_samples"])
            for k in sorted(self.values):
                w.writerow([k, repr(self.values[k]), self.n_samples[k]])
        lines = [
            f"feature_extractor_id: {self.feature_extractor_id}",
            f"config_digest: {self.config_digest}",
            "identity similarity uses the surrogate identity encoder",
        ]
        lines += [f"{k}: {self.values[k]:.6f}  (n={self.n_samples[k]})" for k in sorted(self.values)]
        (out / "report.txt").write_text("\n".join(lines) + "\n")


def _images(src, size: int | None) -> list[torch.Tensor]:
    if isinstance(src, (str, Path)):
        if size is None:
            raise ContractError("image size is required to load a folder")
        return list(load_image_folder(src, size).images)
    if isinstance(src, torch.Tensor) and src.ndim == 4:
        return list(src)
    return list(src)


def evaluate(
    outputs,
    references,
    cfg: ExpertConfig | None = None,
    extractor_id: str = DEFAULT_EXTRACTOR,
    out_dir=None,
    image_size: int | None = None,
    config_digest: str | None = None,
) -> MetricsReport:
    """FID over the pooled sets plus per-pair SSIM, perceptual and identity means.

    Pairs are formed by position; ``outputs`` and ``references`` may be
    folders of PNGs (lexicographic order), tensors or lists of images.
    """
    cfg = cfg or ExpertConfig()
    outs, refs = _images(outputs, image_size), _images(references, image_size)
    if not outs or not refs:
        raise ContractError("evaluate needs non-empty output and reference sets")
    f_ref = extract_features(refs, extractor_id)
    f_out = extract_features(outs, extractor_id)
    n = min(len(outs), len(refs))
    pairs = []
    for i in range(n):
        pairs.append(
            {
                "ssim": ssim(outs[i], refs[i]),
                "perceptual": perceptual_distance(outs[i], refs[i], extractor_id),
                "id_similarity": identity_similarity(outs[i], refs[i], cfg),
            }
        )
    values = {k: float(np.mean([p[k] for p in pairs])) for k in ("ssim", "perceptual", "id_similarity")}
    values["fid"] = fid(f_ref, f_out)
    counts = {k: n for k in ("ssim", "perceptual", "id_similarity")}
    counts["fid"] = len(outs)
    if config_digest is None:
        config_digest = hashlib.sha256(f"{cfg!r}|{extractor_id}".encode()).hexdigest()[:16]
    report = MetricsReport(values, counts, extractor_id, config_digest, pairs)
    report.check()
    if out_dir is not None:
        report.write(out_dir)
    return report
