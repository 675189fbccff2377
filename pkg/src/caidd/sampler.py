"""Conditional ancestral sampling: source identity onto target structure.

Each request owns a generator seeded from its ``seed``; the initial noise
and every per-step noise draw come from it, so a request's output does not
depend on which other requests share its batch.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import torch

from .checkpoint import Checkpoint
from .denoiser import Denoiser
from .errors import CaiddError, ConfigError, ContractError, NumericError
from .experts import ConditionBundle, get_experts
from .schedule import posterior_step, respace, schedule_from_config, strided_timesteps
from .trainer import build_model

ABLATION_FLAGS = ("disable_cross_attention", "disable_identity_token", "disable_parse_tokens", "disable_gaze_token")


@dataclass
class SampleRequest:
    source: torch.Tensor  # [3, S, S] in [-1, 1]
    target: torch.Tensor
    seed: int = 0
    steps: int | None = None  # None: every timestep
    overrides: dict[str, bool] = field(default_factory=dict)


def load_model(ckpt: Checkpoint, overrides: dict[str, bool] | None = None) -> Denoiser:
    """Denoiser from a checkpoint, optionally with ablation flags switched on.

    Parameters of modules removed by an override are simply not loaded.
    """
    cfg = ckpt.train_config
    overrides = dict(overrides or {})
    bad = sorted(set(overrides) - set(ABLATION_FLAGS))
    if bad:
        raise ConfigError(f"unknown sampling override(s) {bad}; valid: {', '.join(ABLATION_FLAGS)}")
    if overrides:
        cfg = dataclasses.replace(cfg, denoiser=dataclasses.replace(cfg.denoiser, **overrides))
    model = build_model(cfg)
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(ckpt.params))
    if missing:
        raise ConfigError(f"checkpoint lacks parameters {missing[:3]}")
    with torch.no_grad():
        for name, p in params.items():
            p.copy_(torch.from_numpy(ckpt.params[name]))
    return model.eval()


def _validate(req: SampleRequest, ckpt: Checkpoint) -> int:
    cfg = ckpt.train_config
    size, T = cfg.denoiser.image_size, cfg.schedule.T
    for name in ("source", "target"):
        img = getattr(req, name)
        if img.shape != (3, size, size):
            raise ConfigError(f"{name} image is {tuple(img.shape)}, checkpoint expects (3, {size}, {size})")
    steps = T if req.steps is None else int(req.steps)
    if not 1 <= steps <= T:
        raise ContractError(f"steps must lie in 1..{T}, got {steps}")
    return steps


def _clip_eps(x_t: torch.Tensor, eps: torch.Tensor, t: int, sched) -> torch.Tensor:
    """Noise estimate consistent with the clamped x0 estimate.

    Feeding this to ``posterior_step`` gives the posterior mean around a
    valid image. Without it the first steps, where 1/sqrt(alpha) is ~30,
    amplify small eps errors far outside [-1, 1].
    """
    ab = float(sched.alpha_bar[t - 1])
    x0 = ((x_t - math.sqrt(1 - ab) * eps) / math.sqrt(ab)).clamp(-1.0, 1.0)
    return (x_t - math.sqrt(ab) * x0) / math.sqrt(1 - ab)


def _run(model: Denoiser, ckpt: Checkpoint, reqs: list[SampleRequest], steps: int) -> torch.Tensor:
    cfg = ckpt.train_config
    base = schedule_from_config(cfg.schedule)
    if steps == base.T:
        ts = list(range(base.T, 0, -1))
        sched = base
    else:
        ts = strided_timesteps(base.T, steps)
        sched = respace(base, ts)
    experts = get_experts(cfg.expert_config)
    source = torch.stack([r.source for r in reqs]).to(torch.float32)
    target = torch.stack([r.target for r in reqs]).to(torch.float32)
    with torch.no_grad():
        bundle: ConditionBundle = experts.build_condition(source)
        gens = [torch.Generator().manual_seed(int(r.seed)) for r in reqs]
        shape = (3, cfg.denoiser.image_size, cfg.denoiser.image_size)
        x = torch.stack([torch.randn(shape, generator=g) for g in gens])
        for k, t in zip(range(len(ts), 0, -1), ts):
            try:
                eps = model(x, torch.full((len(reqs),), t, dtype=torch.long), target, bundle)
            except NumericError as exc:
                raise NumericError(f"t={t}: {exc}") from None
            z = torch.stack([torch.randn(shape, generator=g) for g in gens]) if k > 1 else None
            x = posterior_step(x, _clip_eps(x, eps, k, sched), k, sched, z)
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite sample at t={t}")
    return x.clamp(-1.0, 1.0)


def sample(req: SampleRequest, checkpoint: Checkpoint, model: Denoiser | None = None) -> torch.Tensor:
    """Generate one [3, S, S] image in [-1, 1]."""
    steps = _validate(req, checkpoint)
    if model is None:
        model = load_model(checkpoint, req.overrides)
    return _run(model, checkpoint, [req], steps)[0]


def sample_batch(requests: list[SampleRequest], checkpoint: Checkpoint) -> list[torch.Tensor]:
    """Outputs in request order, each equal to what ``sample`` returns for it.

    Requests are processed one at a time through a shared model per override
    set: batched convolutions are not guaranteed to be bitwise equal to
    single-image ones on every backend.
    """
    models: dict[tuple, Denoiser] = {}
    out = []
    for i, req in enumerate(requests):
        try:
            key = tuple(sorted(req.overrides.items()))
            if key not in models:
                models[key] = load_model(checkpoint, req.overrides)
            out.append(sample(req, checkpoint, models[key]))
        except CaiddError as exc:
            raise type(exc)(f"request {i}: {exc}") from exc
    return out


def sample_stacked(requests: list[SampleRequest], checkpoint: Checkpoint, model: Denoiser | None = None) -> torch.Tensor:
    """Fast path for evaluation: all requests in one batch, [B, 3, S, S].

    Requests must share ``steps`` and ``overrides``. Per-request noise
    streams are the same as in ``sample``; results agree with it up to
    floating-point reassociation in batched kernels.
    """
    if not requests:
        raise ContractError("no requests")
    steps = {_validate(r, checkpoint) for r in requests}
    keys = {tuple(sorted(r.overrides.items())) for r in requests}
    if len(steps) != 1 or len(keys) != 1:
        raise ContractError("stacked requests must share steps and overrides")
    if model is None:
        model = load_model(checkpoint, requests[0].overrides)
    return _run(model, checkpoint, requests, steps.pop())
