"""Training loop: noise and timestep draws, conditioning, losses, Adam updates.

Training is self-reconstruction: the condition bundle and the target view
both come from the clean image being noised. A single seeded generator
drives data order, timesteps and noise, and its state travels with the
checkpoint so that a resumed run continues the exact same stream.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, save_checkpoint
from .config import TrainConfig, dump_text, replace_path
from .denoiser import Denoiser
from .errors import ConfigError, ContractError, NumericError
from .experts import ConditionBundle, Experts, get_experts
from .losses import LossBreakdown, diffusion_loss, total_loss
from .schedule import NoiseSchedule, forward_diffuse, schedule_from_config, x0_estimate
from .synthfaces import load_image_folder, make_dataset, stack_images

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "l_diff", "l_id", "l_parse", "l_gaze", "l_total", "lr")
VAL_COLUMNS = ("step", "val_l_diff")
VAL_IMAGES = 16
VAL_SEED_OFFSET = 1


@dataclass
class TrainState:
    cfg: TrainConfig
    model: Denoiser
    optimizer: torch.optim.Optimizer
    schedule: NoiseSchedule
    experts: Experts
    generator: torch.Generator
    data: torch.Tensor
    bundles: ConditionBundle
    step: int = 0
    history: list[dict] = field(default_factory=list)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Learning rate used for update number ``step`` (1-based)."""
    w = cfg.warmup
    if w > 0 and step <= w:
        return cfg.learning_rate * step / w
    return cfg.learning_rate


def build_model(cfg: TrainConfig) -> Denoiser:
    # fork so that model init never disturbs the caller's global RNG
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        alpha_bar = schedule_from_config(cfg.schedule).alpha_bar
        return Denoiser(cfg.denoiser, cfg.experts.d_id, cfg.experts.d_parse, alpha_bar)


def model_from_checkpoint(ckpt: Checkpoint) -> Denoiser:
    model = build_model(ckpt.train_config)
    missing = set(dict(model.named_parameters())) - set(ckpt.params)
    if missing:
        raise ConfigError(f"checkpoint lacks parameters: {sorted(missing)[:3]}")
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(torch.from_numpy(ckpt.params[name]))
    model.eval()
    return model


def load_dataset(cfg: TrainConfig) -> torch.Tensor:
    d, size = cfg.data, cfg.denoiser.image_size
    if d.kind == "synthetic":
        return stack_images(make_dataset(d.n, d.n_identities, d.seed, size))
    folder = load_image_folder(d.path, size)
    if len(folder) == 0:
        raise ContractError(f"no readable PNG images in {d.path}")
    return torch.stack(folder.images)


def _check_dataset(data: torch.Tensor, cfg: TrainConfig) -> torch.Tensor:
    data = torch.as_tensor(data)
    size = cfg.denoiser.image_size
    if data.ndim != 4 or data.shape[0] == 0:
        raise ContractError("dataset must be a non-empty [N, 3, H, W] tensor")
    if data.shape[1:] != (3, size, size):
        raise ConfigError(f"dataset images are {tuple(data.shape[1:])}, denoiser.image_size expects (3, {size}, {size})")
    if data.min() < -1 or data.max() > 1:
        raise ContractError("dataset values must lie in [-1, 1]")
    return data.to(torch.float32)


def _bundles(experts: Experts, data: torch.Tensor, chunk: int = 64) -> ConditionBundle:
    with torch.no_grad():
        parts = [experts.build_condition(data[i : i + chunk]) for i in range(0, data.shape[0], chunk)]
    return ConditionBundle.cat(parts)


def init_state(data, cfg: TrainConfig) -> TrainState:
    data = _check_dataset(data, cfg)
    model = build_model(cfg)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    experts = get_experts(cfg.expert_config)
    gen = torch.Generator().manual_seed(cfg.seed)
    return TrainState(cfg, model, opt, schedule_from_config(cfg.schedule), experts, gen, data, _bundles(experts, data))


def draw_timesteps(g: torch.Generator, n: int, T: int) -> torch.Tensor:
    """n timesteps uniform on 1..T."""
    return torch.randint(1, T + 1, (n,), generator=g)


def _draw_indices(state: TrainState) -> torch.Tensor:
    n, b = state.data.shape[0], state.cfg.batch_size
    if b <= n:
        return torch.randperm(n, generator=state.generator)[:b]
    return torch.randint(0, n, (b,), generator=state.generator)


def train_step(batch: torch.Tensor, state: TrainState, bundle: ConditionBundle | None = None):
    """Apply exactly one optimizer update on ``batch``; return (state, LossBreakdown)."""
    cfg, g = state.cfg, state.generator
    if batch.min() < -1 or batch.max() > 1:
        raise ContractError("batch values must lie in [-1, 1]")
    k = state.step + 1
    b = batch.shape[0]
    t = draw_timesteps(g, b, state.schedule.T)
    eps = torch.randn(batch.shape, generator=g, dtype=batch.dtype)
    if bundle is None:
        bundle = _bundles(state.experts, batch)
    x_t = forward_diffuse(batch, t, eps, state.schedule)
    try:
        eps_pred = state.model(x_t, t, batch, bundle)
    except NumericError as exc:
        raise NumericError(f"step {k}: {exc}") from None

    x0_hat, ref, gaze_ref = None, None, None
    if cfg.weights.any_expert:
        sel = torch.nonzero(t <= cfg.expert_t_max).reshape(-1)
        if sel.numel():
            x0_hat = x0_estimate(x_t[sel], eps_pred[sel], t[sel], state.schedule)
            ref = bundle.index(sel)
            if cfg.gaze_reference == "target":
                # the target view is the same clean image under self-reconstruction
                gaze_ref = ref
    bd = total_loss(
        eps, eps_pred, x0_hat, ref, cfg.weights, cfg.expert_config, cfg.parse_loss_mode, cfg.gaze_loss_mode, gaze_ref
    )
    for name in LossBreakdown.FIELDS:
        if not torch.isfinite(getattr(bd, name)):
            raise NumericError(f"step {k}: non-finite {name}")

    lr = lr_at(k, cfg)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    bd.l_total.backward()
    torch.nn.utils.clip_grad_norm_(state.model.parameters(), cfg.grad_clip)
    state.optimizer.step()
    state.step = k
    out = LossBreakdown(*(getattr(bd, f).detach() for f in LossBreakdown.FIELDS))
    state.history.append({"step": k, **out.as_floats(), "lr": lr})
    return state, out


def validation_loss(model: Denoiser, data: torch.Tensor, bundles: ConditionBundle, cfg: TrainConfig) -> float:
    """l_diff on a fixed subset with fixed timesteps and noise."""
    sched = schedule_from_config(cfg.schedule)
    n = min(VAL_IMAGES, data.shape[0])
    g = torch.Generator().manual_seed(cfg.seed + VAL_SEED_OFFSET)
    x0 = data[:n]
    t = torch.linspace(1, sched.T, n).round().to(torch.long)
    eps = torch.randn(x0.shape, generator=g, dtype=x0.dtype)
    was = model.training
    model.eval()
    with torch.no_grad():
        pred = model(forward_diffuse(x0, t, eps, sched), t, x0, bundles.index(slice(0, n)))
    model.train(was)
    return float(diffusion_loss(eps, pred))


# -- checkpoint conversion --------------------------------------------------


def state_to_checkpoint(state: TrainState) -> Checkpoint:
    names = [n for n, _ in state.model.named_parameters()]
    params = {n: p.detach().cpu().numpy().copy() for n, p in state.model.named_parameters()}
    optim = {}
    for i, st in state.optimizer.state_dict()["state"].items():
        for key, val in st.items():
            optim[f"{names[i]}/{key}"] = torch.as_tensor(val).detach().cpu().numpy().copy()
    rng = state.generator.get_state().numpy().tobytes()
    return Checkpoint(state.step, state.cfg, params, optim, rng)


def state_from_checkpoint(ckpt: Checkpoint, data) -> TrainState:
    state = init_state(data, ckpt.train_config)
    with torch.no_grad():
        for name, p in state.model.named_parameters():
            p.copy_(torch.from_numpy(ckpt.params[name]))
    names = [n for n, _ in state.model.named_parameters()]
    sd = state.optimizer.state_dict()
    restored = {}
    for i, name in enumerate(names):
        entries = {k.split("/")[-1]: v for k, v in ckpt.optimizer_state.items() if k.rsplit("/", 1)[0] == name}
        if entries:
            restored[i] = {k: torch.from_numpy(v.copy()) for k, v in entries.items()}
    sd["state"] = restored
    state.optimizer.load_state_dict(sd)
    if ckpt.rng_state:
        state.generator.set_state(torch.from_numpy(np.frombuffer(ckpt.rng_state, dtype=np.uint8).copy()))
    state.step = ckpt.step
    return state


# -- outer loop -------------------------------------------------------------


def _write_rows(path: Path, columns, rows, append: bool) -> None:
    new = not append or not path.exists()
    with path.open("w" if new else "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(columns)
        for r in rows:
            w.writerow([r["step"]] + [repr(float(r[c])) for c in columns[1:]])


def read_loss_log(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def _truncate_log(path: Path, columns, step: int) -> None:
    if not path.exists():
        return
    rows = [r for r in read_loss_log(path) if r["step"] <= step]
    _write_rows(path, columns, rows, append=False)


def fit(
    dataset,
    cfg: TrainConfig,
    out_dir=None,
    resume: Checkpoint | None = None,
    history: list | None = None,
) -> Checkpoint:
    """Run ``cfg.steps`` updates (continuing from ``resume`` if given).

    With ``out_dir`` set, writes ``losses.csv``, ``val.csv``, periodic
    ``ckpt_XXXXXXX.ckpt`` files, ``final.ckpt`` and ``config.resolved``.
    Per-step loss rows are also appended to ``history`` when supplied.
    """
    if resume is not None:
        if resume.train_config != cfg:
            # only the step budget may differ between the original run and the resumed one
            if replace_path(resume.train_config, "steps", cfg.steps) != cfg:
                raise ConfigError("resume checkpoint was trained with a different configuration")
        state = state_from_checkpoint(resume, dataset)
        state.cfg = cfg
    else:
        state = init_state(dataset, cfg)
    if state.step > cfg.steps:
        raise ContractError(f"checkpoint step {state.step} is beyond steps={cfg.steps}")

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved").write_text(dump_text(cfg))
        for name, cols in (("losses.csv", LOSS_COLUMNS), ("val.csv", VAL_COLUMNS)):
            if resume is None:
                _write_rows(out / name, cols, [], append=False)
            else:
                _truncate_log(out / name, cols, state.step)

    pending = []
    while state.step < cfg.steps:
        idx = _draw_indices(state)
        _, bd = train_step(state.data[idx], state, state.bundles.index(idx))
        row = state.history[-1]
        pending.append(row)
        if history is not None:
            history.append(row)
        k = state.step
        if out is not None and (len(pending) >= 100 or k == cfg.steps):
            _write_rows(out / "losses.csv", LOSS_COLUMNS, pending, append=True)
            pending = []
        if cfg.eval_every and k % cfg.eval_every == 0:
            v = validation_loss(state.model, state.data, state.bundles, cfg)
            log.info("step %d  l_diff %.4f  val %.4f", k, row["l_diff"], v)
            if out is not None:
                _write_rows(out / "val.csv", VAL_COLUMNS, [{"step": k, "val_l_diff": v}], append=True)
        if out is not None and cfg.checkpoint_every and k % cfg.checkpoint_every == 0:
            save_checkpoint(state_to_checkpoint(state), out / f"ckpt_{k:07d}.ckpt")
    if out is not None and pending:
        _write_rows(out / "losses.csv", LOSS_COLUMNS, pending, append=True)

    ckpt = state_to_checkpoint(state)
    if out is not None:
        save_checkpoint(ckpt, out / "final.ckpt")
    return ckpt


def moving_average(values, window: int = 100) -> float:
    tail = list(values)[-window:]
    if not tail:
        return math.nan
    return float(np.mean(tail))
