"""U-Net noise predictor with cross-attention at selectable resolutions.

Resolution names: ``high`` is the full image size, ``mid`` half of it and
``low`` a quarter. Each selected resolution gets one cross-attention block
in the encoder and one in the decoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .attention import GAZE, IDENTITY, MODALITIES, PARSING, ConcatProj, CrossAttention
from .errors import ConfigError, DimensionError, NumericError
from .experts import ConditionBundle

LEVEL_NAMES = ("high", "mid", "low")
# target view: the face region is blanked so identity must come from the condition
TARGET_MASK_AXES = (0.37, 0.44)


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 32
    base_channels: int = 64
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    attention_placements: tuple[str, ...] = ("low", "mid", "high")
    time_embed_dim: int = 256
    use_target_concat: bool = True
    mask_target_face: bool = True
    n_heads: int = 4
    d_head: int = 32
    disable_cross_attention: bool = False
    disable_identity_token: bool = False
    disable_parse_tokens: bool = False
    disable_gaze_token: bool = False
    # "v": the network output is read as v and converted to eps with the schedule
    prediction: str = "eps"

    def __post_init__(self):
        if self.prediction not in ("eps", "v"):
            raise ConfigError(f"denoiser.prediction must be 'eps' or 'v', got {self.prediction!r}")
        levels = len(self.channel_multipliers)
        if not 1 <= levels <= len(LEVEL_NAMES):
            raise ConfigError(f"denoiser.channel_multipliers must have 1..{len(LEVEL_NAMES)} entries")
        if self.image_size < 1 or self.image_size % (2 ** (levels - 1)):
            raise ConfigError(f"denoiser.image_size={self.image_size} not divisible by {2 ** (levels - 1)}")
        if self.base_channels < 1 or self.base_channels % 2:
            raise ConfigError("denoiser.base_channels must be a positive even integer")
        available = LEVEL_NAMES[:levels]
        for p in self.attention_placements:
            if p not in available:
                raise ConfigError(f"denoiser.attention_placements: '{p}' not available (have {', '.join(available)})")
        if self.n_heads < 1 or self.d_head < 1:
            raise ConfigError("denoiser.n_heads and denoiser.d_head must be positive")

    @property
    def d_model(self) -> int:
        return self.n_heads * self.d_head

    @property
    def kept_modalities(self) -> tuple[str, ...]:
        drop = {IDENTITY: self.disable_identity_token, PARSING: self.disable_parse_tokens, GAZE: self.disable_gaze_token}
        return tuple(m for m in MODALITIES if not drop[m])


def sinusoidal_embedding(t, dim: int) -> torch.Tensor:
    """Standard transformer sinusoid of timestep(s) t, shape [B, dim]."""
    if dim < 2 or dim % 2:
        raise ConfigError(f"time embedding dim must be even and >= 2, got {dim}")
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class TimeEmbedding(nn.Module):
    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        if dim % 2:
            raise ConfigError(f"time embedding dim must be even, got {dim}")
        self.dim = dim
        self.lin1 = nn.Linear(dim, out_dim)
        self.lin2 = nn.Linear(out_dim, out_dim)

    def forward(self, t) -> torch.Tensor:
        e = sinusoidal_embedding(t, self.dim).to(self.lin1.weight.dtype)
        return self.lin2(F.silu(self.lin1(e)))


def time_embedding(t, dim: int, module: TimeEmbedding | None = None) -> torch.Tensor:
    """Sinusoid followed by the learned projection when ``module`` is given."""
    if module is None:
        return sinusoidal_embedding(t, dim)
    if module.dim != dim:
        raise ConfigError(f"module expects dim={module.dim}, got {dim}")
    return module(t)


def _groups(ch: int) -> int:
    return math.gcd(8, ch)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Level(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int, attn: CrossAttention | None):
        super().__init__()
        self.res1 = ResBlock(cin, cout, temb_dim)
        self.res2 = ResBlock(cout, cout, temb_dim)
        self.attn = attn


def face_region_mask(size: int) -> torch.Tensor:
    """[1, 1, S, S] float mask, 1 inside the blanked face ellipse."""
    c = (torch.arange(size, dtype=torch.float64) + 0.5) / size
    v, u = torch.meshgrid(c, c, indexing="ij")
    ax, ay = TARGET_MASK_AXES
    inside = ((u - 0.5) / ax) ** 2 + ((v - 0.52) / ay) ** 2 <= 1.0
    return inside.to(torch.float32)[None, None]


def _finite(h: torch.Tensor, name: str) -> torch.Tensor:
    if not torch.isfinite(h).all():
        raise NumericError(f"non-finite activations after {name}")
    return h


class Denoiser(nn.Module):
    """eps_theta(x_t, t | target, bundle)."""

    def __init__(self, cfg: DenoiserConfig, d_id: int = 128, d_parse: int = 64, alpha_bar=None):
        super().__init__()
        self.cfg = cfg
        if cfg.prediction == "v":
            if alpha_bar is None:
                raise ConfigError("denoiser.prediction = v needs the schedule's alpha_bar")
            self.register_buffer("alpha_bar", torch.tensor(alpha_bar, dtype=torch.float64), persistent=False)
        ch = [cfg.base_channels * m for m in cfg.channel_multipliers]
        temb = cfg.time_embed_dim
        self.time_embed = TimeEmbedding(cfg.base_channels, temb)
        use_attn = not cfg.disable_cross_attention
        self.token_proj = ConcatProj(d_id, d_parse, cfg.d_model) if use_attn else None

        def attn(level: int, c: int):
            if use_attn and LEVEL_NAMES[level] in cfg.attention_placements:
                return CrossAttention(c, cfg.d_model, cfg.n_heads)
            return None

        in_ch = 3
        if cfg.use_target_concat:
            in_ch += 4 if cfg.mask_target_face else 3
        self.conv_in = nn.Conv2d(in_ch, ch[0], 3, padding=1)
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        cur = ch[0]
        for i, c in enumerate(ch):
            self.down.append(Level(cur, c, temb, attn(i, c)))
            cur = c
            if i < len(ch) - 1:
                self.downsample.append(nn.Conv2d(c, c, 3, stride=2, padding=1))
        self.mid1 = ResBlock(cur, cur, temb)
        self.mid2 = ResBlock(cur, cur, temb)
        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in reversed(range(len(ch))):
            c = ch[i]
            self.up.append(Level(cur + c, c, temb, attn(i, c)))
            cur = c
            if i > 0:
                self.upsample.append(nn.Conv2d(c, c, 3, padding=1))
        self.norm_out = nn.GroupNorm(_groups(cur), cur)
        self.conv_out = nn.Conv2d(cur, 3, 3, padding=1)
        self.register_buffer("face_mask", face_region_mask(cfg.image_size), persistent=False)

    def tokens(self, bundle: ConditionBundle):
        if self.token_proj is None:
            return None
        w = self.token_proj.id_proj.weight
        bundle = bundle.to(dtype=w.dtype, device=w.device)
        return self.token_proj(bundle).select(self.cfg.kept_modalities)

    def _level(self, level: Level, h, temb, tokens, name):
        h = _finite(level.res1(h, temb), f"{name}.res1")
        h = _finite(level.res2(h, temb), f"{name}.res2")
        if level.attn is not None:
            h = _finite(level.attn(h, tokens), f"{name}.attn")
        return h

    def forward(self, x_t: torch.Tensor, t, target: torch.Tensor | None, bundle: ConditionBundle | None):
        cfg = self.cfg
        if x_t.ndim != 4 or x_t.shape[1] != 3 or x_t.shape[-2:] != (cfg.image_size, cfg.image_size):
            raise DimensionError(f"x_t must be [B, 3, {cfg.image_size}, {cfg.image_size}], got {tuple(x_t.shape)}")
        b = x_t.shape[0]
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1 and b > 1:
            t = t.expand(b)
        temb = self.time_embed(t)
        parts = [x_t]
        if cfg.use_target_concat:
            if target is None or target.shape != x_t.shape:
                raise DimensionError("target must be supplied with the same shape as x_t")
            if cfg.mask_target_face:
                m = self.face_mask.to(x_t.dtype)
                parts += [target * (1 - m), m.expand(b, 1, -1, -1)]
            else:
                parts.append(target)
        tokens = None
        if self.token_proj is not None:
            if bundle is None:
                raise DimensionError("a condition bundle is required when cross-attention is enabled")
            if bundle.batch_size != b:
                raise DimensionError(f"bundle batch {bundle.batch_size} != image batch {b}")
            tokens = self.tokens(bundle)

        h = _finite(self.conv_in(torch.cat(parts, 1)), "conv_in")
        skips = []
        for i, level in enumerate(self.down):
            h = self._level(level, h, temb, tokens, f"down.{LEVEL_NAMES[i]}")
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        h = _finite(self.mid2(self.mid1(h, temb), temb), "mid")
        n = len(self.up)
        for j, level in enumerate(self.up):
            h = torch.cat([h, skips.pop()], 1)
            h = self._level(level, h, temb, tokens, f"up.{LEVEL_NAMES[n - 1 - j]}")
            if j < len(self.upsample):
                h = self.upsample[j](F.interpolate(h, scale_factor=2, mode="nearest"))
        out = _finite(self.conv_out(F.silu(self.norm_out(h))), "conv_out")
        if cfg.prediction == "v":
            out = self._v_to_eps(out, x_t, t)
        return out

    def _v_to_eps(self, v, x_t, t):
        # x_t = sqrt(ab) x0 + sqrt(1 - ab) eps and v = sqrt(ab) eps - sqrt(1 - ab) x0
        T = self.alpha_bar.shape[0]
        if int(t.min()) < 1 or int(t.max()) > T:
            raise DimensionError(f"timesteps must lie in 1..{T}")
        ab = self.alpha_bar[t.long() - 1].to(v.dtype).reshape(-1, 1, 1, 1)
        return torch.sqrt(ab) * v + torch.sqrt(1 - ab) * x_t

    def attention_blocks(self):
        return [m for m in self.modules() if isinstance(m, CrossAttention)]


def denoise_predict(x_t, t, target, bundle, model: Denoiser) -> torch.Tensor:
    return model(x_t, t, target, bundle)
