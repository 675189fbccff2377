"""Frozen surrogate experts: identity recognizer, face parser, gaze estimator.

Each surrogate is a small convolutional feature extractor whose weights are
drawn once from ``surrogate_seed`` and never trained, followed by a fixed
read-out. They assume center-aligned faces, as real aligned face datasets
are, and are differentiable in the input image so they can sit inside the
training losses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DimensionError

MIN_SIZE = 16

# canonical layout of an aligned face in unit coordinates (x right, y down)
FACE = (0.5, 0.52, 0.27, 0.34)
EYES = ((0.385, 0.45), (0.615, 0.45))
NOSE = (0.5, 0.56)
MOUTH = (0.5, 0.70)
GAZE_SCALE = 0.03  # centroid offset (unit coords) read as a fully sideways gaze
GAZE_DEPTH = 0.2
# (cx, cy, sx, sy) pooling windows for identity features: face, eyes, nose, mouth
ID_POOLS = ((0.5, 0.52, 0.2, 0.24), (0.385, 0.45, 0.08, 0.06), (0.615, 0.45, 0.08, 0.06), (0.5, 0.58, 0.06, 0.08), (0.5, 0.7, 0.1, 0.05))
ID_CALIBRATION = 256


@dataclass(frozen=True)
class ExpertConfig:
    d_id: int = 128
    d_parse: int = 64
    n_regions: int = 5
    surrogate_seed: int = 0
    image_size: int | None = None  # None accepts any square size >= 16

    def __post_init__(self):
        for name in ("d_id", "d_parse", "n_regions"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"experts.{name} must be a positive integer, got {v!r}")
        if self.image_size is not None and self.image_size < MIN_SIZE:
            raise ConfigError(f"experts.image_size must be >= {MIN_SIZE}")


@dataclass
class ConditionBundle:
    """Batched conditioning payload for one or more source images."""

    e_id: torch.Tensor  # [B, D_id], unit norm
    e_parse: torch.Tensor  # [B, N_regions, D_parse]
    region_masks: torch.Tensor  # [B, N_regions, H, W]
    e_gaze: torch.Tensor  # [B, 3], unit norm

    @property
    def batch_size(self) -> int:
        return self.e_id.shape[0]

    def index(self, idx) -> "ConditionBundle":
        return ConditionBundle(self.e_id[idx], self.e_parse[idx], self.region_masks[idx], self.e_gaze[idx])

    def to(self, *args, **kwargs) -> "ConditionBundle":
        return ConditionBundle(*(t.to(*args, **kwargs) for t in self.tensors()))

    def tensors(self):
        return (self.e_id, self.e_parse, self.region_masks, self.e_gaze)

    def detach(self) -> "ConditionBundle":
        return ConditionBundle(*(t.detach() for t in self.tensors()))

    @staticmethod
    def cat(bundles) -> "ConditionBundle":
        return ConditionBundle(*(torch.cat(ts) for ts in zip(*(b.tensors() for b in bundles))))

    def check(self, tol: float = 1e-6) -> None:
        """Raise ``AssertionError`` if any bundle invariant is violated."""
        for t in self.tensors():
            assert torch.isfinite(t).all(), "non-finite bundle entry"
        assert torch.allclose(self.e_id.norm(dim=-1), torch.ones(()).to(self.e_id), atol=tol)
        assert torch.allclose(self.e_gaze.norm(dim=-1), torch.ones(()).to(self.e_gaze), atol=tol)
        assert (self.region_masks >= 0).all()
        assert (self.region_masks.sum(1) <= 1 + 1e-5).all()


def _grid(n: int, dtype=torch.float64):
    c = (torch.arange(n, dtype=dtype) + 0.5) / n
    v, u = torch.meshgrid(c, c, indexing="ij")
    return u, v


def _gauss(u, v, cx, cy, sx, sy):
    return torch.exp(-0.5 * (((u - cx) / sx) ** 2 + ((v - cy) / sy) ** 2))


def region_templates(n: int, n_regions: int) -> torch.Tensor:
    """Soft prior [n_regions, n, n] over where each region sits on an aligned face."""
    u, v = _grid(n)
    cx, cy, ax, ay = FACE
    inside = torch.sigmoid(12.0 * (1 - ((u - cx) / ax) ** 2 - ((v - cy) / ay) ** 2))
    eyes = sum(_gauss(u, v, ex, ey, 0.06, 0.035) for ex, ey in EYES)
    nose = _gauss(u, v, *NOSE, 0.04, 0.05)
    mouth = _gauss(u, v, *MOUTH, 0.09, 0.03)
    scores = [0.6 * inside, eyes, nose, mouth, 0.8 * (1 - inside)]
    scores = [s + 0.02 for s in scores[:n_regions]]
    scores += [torch.full_like(u, 0.02)] * max(0, n_regions - len(scores))
    t = torch.stack(scores)
    return t / t.sum(0, keepdim=True)


def _seeded_conv(gen: torch.Generator, cout: int, cin: int, k: int, zero_sum: bool = False) -> torch.Tensor:
    w = torch.randn(cout, cin, k, k, generator=gen, dtype=torch.float64)
    if zero_sum:
        w = w - w.mean(dim=(1, 2, 3), keepdim=True)
    return w * math.sqrt(2.0 / (cin * k * k))


def _blur(x: torch.Tensor, sigma: float) -> torch.Tensor:
    r = max(1, int(math.ceil(3 * sigma)))
    k = torch.exp(-0.5 * (torch.arange(-r, r + 1, dtype=x.dtype, device=x.device) / sigma) ** 2)
    k = k / k.sum()
    c = x.shape[1]
    x = F.conv2d(F.pad(x, (r, r, 0, 0), mode="replicate"), k.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    return F.conv2d(F.pad(x, (0, 0, r, r), mode="replicate"), k.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)


def _luminance(x01: torch.Tensor) -> torch.Tensor:
    w = torch.tensor([0.299, 0.587, 0.114], dtype=x01.dtype, device=x01.device)
    return (x01 * w.view(1, 3, 1, 1)).sum(1, keepdim=True)


class Experts(nn.Module):
    """All three surrogates; weights are buffers, so nothing here is trainable."""

    def __init__(self, cfg: ExpertConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(int(cfg.surrogate_seed))
        # identity: colour conv stack + colour statistics, projected to d_id
        self.register_buffer("id_conv1", _seeded_conv(gen, 16, 3, 5, zero_sum=True))
        self.register_buffer("id_conv2", _seeded_conv(gen, 32, 16, 3))
        n_id_feat = 32 * len(ID_POOLS) + 6
        self._id_stats: dict = {}
        self.register_buffer("id_proj", torch.randn(cfg.d_id, n_id_feat, generator=gen, dtype=torch.float64))
        # parsing: luminance-structure features pooled per region
        self.register_buffer("parse_conv", _seeded_conv(gen, cfg.d_parse, 1, 5, zero_sum=True))
        self.register_buffer("mask_conv", _seeded_conv(gen, 8, 3, 3))
        self.register_buffer("mask_readout", 0.3 * torch.randn(cfg.n_regions, 8, generator=gen, dtype=torch.float64))
        for p in self.parameters():  # pragma: no cover - defensive, there are none
            p.requires_grad_(False)

    # -- helpers -----------------------------------------------------------
    def _check(self, image: torch.Tensor) -> None:
        if image.ndim != 4 or image.shape[1] != 3:
            raise DimensionError(f"expected [B, 3, H, W] image, got {tuple(image.shape)}")
        h, w = image.shape[-2:]
        if h != w or h < MIN_SIZE:
            raise DimensionError(f"expected square image of side >= {MIN_SIZE}, got {h}x{w}")
        if self.cfg.image_size is not None and h != self.cfg.image_size:
            raise DimensionError(f"expected {self.cfg.image_size}x{self.cfg.image_size} image, got {h}x{w}")

    def _buf(self, name: str, like: torch.Tensor) -> torch.Tensor:
        return getattr(self, name).to(dtype=like.dtype, device=like.device)

    def _const(self, name: str, n: int, like: torch.Tensor, fn) -> torch.Tensor:
        key = f"_cache_{name}_{n}"
        t = getattr(self, key, None)
        if t is None:
            t = fn(n)
            object.__setattr__(self, key, t)
        return t.to(dtype=like.dtype, device=like.device)

    # -- identity ----------------------------------------------------------
    def _identity_features(self, image: torch.Tensor) -> torch.Tensor:
        n = image.shape[-1]
        x01 = (image + 1) / 2
        u, v = (g.to(image) for g in _grid(n))
        win = _gauss(u, v, FACE[0], FACE[1], 0.2, 0.24)
        wsum = win.sum()
        # lighting normalization: divide by the face-window luminance
        lum = (_luminance(x01)[:, 0] * win).sum((-2, -1)) / wsum
        xn = x01 / (lum.view(-1, 1, 1, 1) + 0.05)
        rgb = (xn * win).sum((-2, -1)) / wsum
        chroma = torch.cat([rgb, rgb[:, :1] - rgb[:, 1:2], rgb[:, 1:2] - rgb[:, 2:3], rgb[:, :1] - rgb[:, 2:3]], 1)

        h = torch.tanh(F.conv2d(xn - 1.0, self._buf("id_conv1", image), padding=2))
        h = F.avg_pool2d(h, 2)
        h = torch.tanh(F.conv2d(h, self._buf("id_conv2", image), padding=1))
        uh, vh = (g.to(image) for g in _grid(h.shape[-1]))
        feats = []
        for cx, cy, sx, sy in ID_POOLS:
            w = _gauss(uh, vh, cx, cy, sx, sy)
            feats.append((h * w).sum((-2, -1)) / w.sum())
        return torch.cat(feats + [chroma], 1)

    def _identity_stats(self, n: int) -> tuple[torch.Tensor, torch.Tensor]:
        stats = self._id_stats.get(n)
        if stats is None:
            from .synthfaces import make_dataset, stack_images

            faces = make_dataset(ID_CALIBRATION, ID_CALIBRATION, seed=self.cfg.surrogate_seed + 7919, size=n)
            with torch.no_grad():
                f = self._identity_features(stack_images(faces).to(torch.float64))
            stats = (f.mean(0), f.std(0) + 1e-3)
            self._id_stats[n] = stats
        return stats

    def encode_identity(self, image: torch.Tensor) -> torch.Tensor:
        """Unit-norm identity embedding [B, d_id].

        Features are standardized with fixed statistics of a seeded set of
        procedural faces so that cosine similarity is not dominated by what
        every face has in common.
        """
        self._check(image)
        f = self._identity_features(image)
        mu, sd = self._identity_stats(image.shape[-1])
        f = (f - mu.to(f)) / sd.to(f)
        e = f @ self._buf("id_proj", image).T
        return e / e.norm(dim=-1, keepdim=True).clamp_min(1e-12)

    # -- parsing -----------------------------------------------------------
    def encode_parsing(self, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (tokens [B, N, D_parse], soft region masks [B, N, H, W])."""
        self._check(image)
        n = image.shape[-1]
        z = image - image.mean((-2, -1), keepdim=True)
        energy = _blur((z * z).sum(1, keepdim=True), 1.5 * n / 32)
        conf = energy / (energy + 1e-3)
        log_t = self._const("logt", n, image, lambda k: region_templates(k, self.cfg.n_regions).log())
        f = torch.tanh(F.conv2d(z, self._buf("mask_conv", image), padding=1))
        extra = torch.einsum("rk,bkhw->brhw", self._buf("mask_readout", image), f)
        logits = 3.0 * conf * log_t.unsqueeze(0) + extra
        masks = torch.softmax(logits, dim=1)

        lum = _luminance((image + 1) / 2)
        mu = lum.mean((-2, -1), keepdim=True)
        sd = torch.sqrt(((lum - mu) ** 2).mean((-2, -1), keepdim=True) + 1e-4)
        y = (lum - mu) / sd
        g = torch.tanh(F.conv2d(y, self._buf("parse_conv", image), padding=2))
        num = torch.einsum("brhw,bdhw->brd", masks, g)
        tokens = num / (masks.sum((-2, -1)).unsqueeze(-1) + 1e-6)
        return tokens, masks

    # -- gaze --------------------------------------------------------------
    def encode_gaze(self, image: torch.Tensor) -> torch.Tensor:
        """Pupil offset inside each eye, as a unit (x, y, depth) direction.

        Each eye is first located as the contrast-energy centroid of a broad
        window around its canonical position; a narrow window re-centred there
        then gives the offset between dark (pupil) and bright (sclera) mass.
        """
        self._check(image)
        n = image.shape[-1]
        lum = _luminance((image + 1) / 2)[:, 0]
        contrast = lum - _blur(lum.unsqueeze(1), n / 32)[:, 0]
        dark = F.softplus(-contrast, beta=30.0) ** 2
        bright = F.softplus(contrast, beta=30.0) ** 2
        u, v = (g.to(image) for g in _grid(n))

        def centroid(w):
            s = w.sum((-2, -1)) + 1e-12
            return (w * u).sum((-2, -1)) / s, (w * v).sum((-2, -1)) / s

        offset = 0
        for ex, ey in EYES:
            cx, cy = centroid(_gauss(u, v, ex, ey, 0.09, 0.05) * (dark + bright))
            win = _gauss(u, v, cx.view(-1, 1, 1), cy.view(-1, 1, 1), 0.05, 0.03)
            dx, dy = centroid(win * dark)
            bx, by = centroid(win * bright)
            offset = offset + torch.stack([dx - bx, dy - by], -1)
        offset = offset / (2 * GAZE_SCALE)
        g = torch.stack([offset[:, 0], -offset[:, 1], torch.full_like(offset[:, 0], GAZE_DEPTH)], -1)
        return g / g.norm(dim=-1, keepdim=True)

    def build_condition(self, source: torch.Tensor) -> ConditionBundle:
        tokens, masks = self.encode_parsing(source)
        return ConditionBundle(self.encode_identity(source), tokens, masks, self.encode_gaze(source))


@lru_cache(maxsize=16)
def get_experts(cfg: ExpertConfig) -> Experts:
    return Experts(cfg)


def encode_identity(image: torch.Tensor, cfg: ExpertConfig) -> torch.Tensor:
    return get_experts(cfg).encode_identity(image)


def encode_parsing(image: torch.Tensor, cfg: ExpertConfig) -> tuple[torch.Tensor, torch.Tensor]:
    return get_experts(cfg).encode_parsing(image)


def encode_gaze(image: torch.Tensor, cfg: ExpertConfig) -> torch.Tensor:
    return get_experts(cfg).encode_gaze(image)


def build_condition(source: torch.Tensor, cfg: ExpertConfig) -> ConditionBundle:
    return get_experts(cfg).build_condition(source)
