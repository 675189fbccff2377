"""Diffusion loss and the expert-guided refinement terms."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import ConfigError, ContractError, DimensionError
from .experts import ConditionBundle, ExpertConfig, get_experts

DICE_SMOOTH = 1e-6
PARSE_MODES = ("dice", "l1")
GAZE_MODES = ("angular", "l2")


@dataclass(frozen=True)
class LossWeights:
    lambda_id: float = 1.0
    lambda_parse: float = 0.5
    lambda_gaze: float = 0.1

    def __post_init__(self):
        for name in ("lambda_id", "lambda_parse", "lambda_gaze"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"weights.{name} must be finite and >= 0, got {v!r}")

    @property
    def any_expert(self) -> bool:
        return self.lambda_id > 0 or self.lambda_parse > 0 or self.lambda_gaze > 0


@dataclass
class LossBreakdown:
    l_diff: torch.Tensor
    l_id: torch.Tensor
    l_parse: torch.Tensor
    l_gaze: torch.Tensor
    l_total: torch.Tensor

    FIELDS = ("l_diff", "l_id", "l_parse", "l_gaze", "l_total")

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k)) for k in self.FIELDS}


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def diffusion_loss(eps_true: torch.Tensor, eps_pred: torch.Tensor) -> torch.Tensor:
    _same_shape(eps_true, eps_pred, "diffusion_loss")
    return torch.mean((eps_true - eps_pred) ** 2)


def identity_loss(e_gen: torch.Tensor, e_src: torch.Tensor) -> torch.Tensor:
    """Mean of 1 - cos(e_gen, e_src) over the batch (vectors may be 1-D)."""
    _same_shape(e_gen, e_src, "identity_loss")
    ng, ns = e_gen.norm(dim=-1), e_src.norm(dim=-1)
    if (ng == 0).any() or (ns == 0).any():
        raise ContractError("identity_loss: zero embedding vector")
    cos = (e_gen * e_src).sum(-1) / (ng * ns)
    return torch.mean(1 - cos)


def parse_loss(masks_gen: torch.Tensor, masks_ref: torch.Tensor, mode: str = "dice") -> torch.Tensor:
    """Soft Dice (mean over regions) or mean absolute difference of region masks.

    Masks are [N, H, W] or batched [B, N, H, W]. The Dice denominator sums
    squared mask values, which coincides with sum(A) + sum(B) for binary
    masks and makes identical soft masks score exactly zero.
    """
    _same_shape(masks_gen, masks_ref, "parse_loss")
    if mode == "l1":
        return torch.mean(torch.abs(masks_gen - masks_ref))
    if mode != "dice":
        raise ConfigError(f"parse_loss_mode must be one of {PARSE_MODES}, got {mode!r}")
    inter = (masks_gen * masks_ref).sum((-2, -1))
    denom = (masks_gen * masks_gen).sum((-2, -1)) + (masks_ref * masks_ref).sum((-2, -1))
    return torch.mean(1 - 2 * inter / (denom + DICE_SMOOTH))


def gaze_loss(g_gen: torch.Tensor, g_ref: torch.Tensor, mode: str = "angular") -> torch.Tensor:
    """Angle in radians (or Euclidean distance) between unit gaze vectors, batch mean.

    The angle is computed as atan2(|a x b|, a . b), which equals
    arccos(clamp(a . b, -1, 1)) for unit vectors but keeps a bounded
    gradient when the vectors nearly coincide.
    """
    _same_shape(g_gen, g_ref, "gaze_loss")
    for name, g in (("g_gen", g_gen), ("g_ref", g_ref)):
        if (torch.abs(g.norm(dim=-1) - 1) > 1e-3).any():
            raise ContractError(f"gaze_loss: {name} is not a unit vector")
    if mode == "l2":
        return torch.mean((g_gen - g_ref).norm(dim=-1))
    if mode != "angular":
        raise ConfigError(f"gaze_loss_mode must be one of {GAZE_MODES}, got {mode!r}")
    cross = torch.linalg.cross(g_gen, g_ref, dim=-1)
    # sqrt(x + tiny) keeps the derivative finite at exactly parallel vectors
    sin = torch.sqrt((cross * cross).sum(-1) + 1e-30)
    cos = (g_gen * g_ref).sum(-1)
    return torch.mean(torch.atan2(sin, cos))


def total_loss(
    eps_true: torch.Tensor,
    eps_pred: torch.Tensor,
    x0_hat: torch.Tensor | None,
    source_bundle: ConditionBundle | None,
    weights: LossWeights,
    cfg: ExpertConfig,
    parse_mode: str = "dice",
    gaze_mode: str = "angular",
    target_bundle: ConditionBundle | None = None,
) -> LossBreakdown:
    """Diffusion loss plus weighted expert terms on the re-encoded x0 estimate.

    ``x0_hat`` and ``source_bundle`` cover the samples that take part in the
    expert terms (possibly a subset of the batch, or none). When
    ``target_bundle`` is given, gaze is compared against it instead of the
    source.
    """
    l_diff = diffusion_loss(eps_true, eps_pred)
    zero = l_diff.new_zeros(())
    l_id = l_parse = l_gaze = zero
    if x0_hat is not None and x0_hat.shape[0] > 0 and weights.any_expert:
        if source_bundle is None or source_bundle.batch_size != x0_hat.shape[0]:
            raise DimensionError("source_bundle must match the x0_hat batch")
        ex = get_experts(cfg)
        ref = source_bundle.to(dtype=x0_hat.dtype)
        e_gen = ex.encode_identity(x0_hat)
        l_id = identity_loss(e_gen, ref.e_id)
        _, masks_gen = ex.encode_parsing(x0_hat)
        l_parse = parse_loss(masks_gen, ref.region_masks, parse_mode)
        g_gen = ex.encode_gaze(x0_hat)
        g_ref = ref.e_gaze if target_bundle is None else target_bundle.e_gaze.to(x0_hat.dtype)
        l_gaze = gaze_loss(g_gen, g_ref, gaze_mode)
    l_total = l_diff + weights.lambda_id * l_id + weights.lambda_parse * l_parse + weights.lambda_gaze * l_gaze
    return LossBreakdown(l_diff, l_id, l_parse, l_gaze, l_total)
