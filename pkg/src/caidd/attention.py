"""Condition tokens and spatial-to-token cross-attention.

Every spatial position of a feature map becomes one query; the keys and
values come from a short token sequence built from the condition bundle:
one identity token, one token per parsing region, one gaze token. The
attended values are projected back to the feature width and added to the
feature map, so a zero output projection turns the block into the identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigError, DimensionError, NumericError
from .experts import ConditionBundle

IDENTITY, PARSING, GAZE = "identity", "parsing", "gaze"
MODALITIES = (IDENTITY, PARSING, GAZE)


@dataclass
class ConditionTokens:
    tokens: torch.Tensor  # [B, N, d_model]
    modality_tags: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.modality_tags)

    def select(self, keep) -> "ConditionTokens":
        """Keep only tokens whose modality is in ``keep``, preserving order."""
        idx = [i for i, m in enumerate(self.modality_tags) if m in keep]
        return ConditionTokens(self.tokens[:, idx], tuple(self.modality_tags[i] for i in idx))

    def permute(self, perm) -> "ConditionTokens":
        perm = list(perm)
        return ConditionTokens(self.tokens[:, perm], tuple(self.modality_tags[i] for i in perm))


class ConcatProj(nn.Module):
    """Per-modality affine maps from bundle embeddings into the token space."""

    def __init__(self, d_id: int, d_parse: int, d_model: int):
        super().__init__()
        self.d_id, self.d_parse = d_id, d_parse
        self.id_proj = nn.Linear(d_id, d_model)
        self.parse_proj = nn.Linear(d_parse, d_model)
        self.gaze_proj = nn.Linear(3, d_model)

    def forward(self, bundle: ConditionBundle) -> ConditionTokens:
        if bundle.e_id.shape[-1] != self.d_id:
            raise ConfigError(f"identity embedding width {bundle.e_id.shape[-1]} != {self.d_id}")
        if bundle.e_parse.shape[-1] != self.d_parse:
            raise ConfigError(f"parsing token width {bundle.e_parse.shape[-1]} != {self.d_parse}")
        if bundle.e_gaze.shape[-1] != 3:
            raise ConfigError(f"gaze embedding width {bundle.e_gaze.shape[-1]} != 3")
        ident = self.id_proj(bundle.e_id).unsqueeze(1)
        parse = self.parse_proj(bundle.e_parse)
        gaze = self.gaze_proj(bundle.e_gaze).unsqueeze(1)
        n_parse = parse.shape[1]
        tags = (IDENTITY,) + (PARSING,) * n_parse + (GAZE,)
        return ConditionTokens(torch.cat([ident, parse, gaze], 1), tags)


def concat_project(bundle: ConditionBundle, proj: ConcatProj) -> ConditionTokens:
    return proj(bundle)


class CrossAttention(nn.Module):
    """Multi-head cross-attention from a [B, C, H, W] map to condition tokens."""

    def __init__(self, channels: int, d_model: int = 128, n_heads: int = 4):
        super().__init__()
        if d_model % n_heads:
            raise ConfigError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        self.channels, self.d_model, self.n_heads = channels, d_model, n_heads
        self.d_head = d_model // n_heads
        self.W_q = nn.Linear(channels, d_model, bias=False)
        self.W_k = nn.Linear(d_model, d_model, bias=False)
        self.W_v = nn.Linear(d_model, d_model, bias=False)
        self.W_o = nn.Linear(d_model, channels, bias=False)

    def forward(self, feat: torch.Tensor, tokens: ConditionTokens, return_weights: bool = False):
        b, c, h, w = feat.shape
        if c != self.channels:
            raise DimensionError(f"feature map has {c} channels, block expects {self.channels}")
        tok = tokens.tokens
        if tok.ndim != 3 or tok.shape[0] != b or tok.shape[-1] != self.d_model:
            raise DimensionError(f"tokens of shape {tuple(tok.shape)} do not fit batch {b} / d_model {self.d_model}")
        if not torch.isfinite(tok).all():
            raise NumericError("non-finite condition tokens")
        if tok.shape[1] == 0:
            return (feat, None) if return_weights else feat

        nh, dh = self.n_heads, self.d_head
        q = self.W_q(feat.flatten(2).transpose(1, 2))  # [B, HW, d_model]
        q = q.view(b, h * w, nh, dh).transpose(1, 2)  # [B, nh, HW, dh]
        k = self.W_k(tok).view(b, -1, nh, dh).transpose(1, 2)  # [B, nh, N, dh]
        v = self.W_v(tok).view(b, -1, nh, dh).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, h * w, self.d_model)
        out = self.W_o(out).transpose(1, 2).reshape(b, c, h, w)
        res = feat + out
        return (res, attn) if return_weights else res


def cross_attention(feat: torch.Tensor, tokens: ConditionTokens, params: CrossAttention, return_weights: bool = False):
    """Functional entry point; accepts a single [C, H, W] map as well."""
    single = feat.ndim == 3
    if single:
        feat = feat.unsqueeze(0)
        if tokens.tokens.ndim == 2:
            tokens = ConditionTokens(tokens.tokens.unsqueeze(0), tokens.modality_tags)
    out = params(feat, tokens, return_weights=return_weights)
    if not single:
        return out
    if return_weights:
        return out[0][0], out[1][0]
    return out[0]
