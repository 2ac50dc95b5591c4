"""Region-aware cross-attention and region-conditioned sampling.

A global prompt is attended first; then each region's latent rows are
masked (``z * M``), attended against that region's own prompt, and written
back over the global output at the region's positions. Only cross-attention
is regional; self-attention always sees the whole latent.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .adapter import build_prompt, tokenize
from .errors import OverlapWarning, ShapeError
from .toy_diffusion import (
    ModelWeights,
    NoiseSchedule,
    Trace,
    attention_core,
    ddim_loop,
    encode_text,
    initial_latents,
    linear,
    prompt_to_torch,
    to_torch,
)


@dataclass
class RegionSpec:
    """A binary spatial mask and the prompt that governs it.

    ``prompt`` is a token sequence when sampling, or an
    :class:`AttentionContext` when calling :func:`region_aware_attention`
    directly.
    """

    mask: np.ndarray
    prompt: object

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got {m.shape}")
        if not np.all((m == 0) | (m == 1)):
            raise ValueError("mask entries must be 0 or 1")
        if not m.any():
            raise ValueError("mask selects no positions")
        self.mask = m.astype(bool)
        if isinstance(self.prompt, str):
            self.prompt = tokenize(self.prompt)

    def flat(self) -> np.ndarray:
        return self.mask.reshape(-1)


@dataclass
class AttentionContext:
    """Conditioning tokens (already text-encoded) that keys and values read from."""

    keys_source: np.ndarray  # (tokens, d_text)
    layer: int = 0
    head_dim: int = 16

    def __post_init__(self):
        self.keys_source = np.asarray(self.keys_source, dtype=np.float64)
        if self.head_dim <= 0:
            raise ValueError("head_dim must be > 0")
        if self.keys_source.ndim != 2:
            raise ShapeError("keys_source must be (tokens, d_text)")


@dataclass
class RegionAttentionOutput:
    output: np.ndarray
    attention_weights: list[np.ndarray] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


class _AttentionProbe(Trace):
    def __init__(self):
        self.weights = []

    def attention(self, name, w):
        self.weights.append(w.detach().numpy().copy())


def _projection_params(projections: dict, head_dim: int, d_in: int, d_text: int) -> dict:
    params = {}
    for key in ("q", "k", "v", "out"):
        if key not in projections:
            raise ShapeError(f"missing projection {key!r}")
        params[f"x.{key}"] = torch.as_tensor(np.asarray(projections[key], dtype=np.float64))
    expect = {"q": (head_dim, d_in), "k": (head_dim, d_text), "v": (head_dim, d_text)}
    for key, shape in expect.items():
        if tuple(params[f"x.{key}"].shape) != shape:
            raise ShapeError(f"projection {key} is {tuple(params[f'x.{key}'].shape)}, expected {shape}")
    if params["x.out"].shape[1] != head_dim:
        raise ShapeError(f"output projection expects {params['x.out'].shape[1]} inputs, head_dim is {head_dim}")
    return params


def regional_attention_t(params, prefix, x, global_cond, regional, trace):
    """Torch core: global attention, then masked regional overwrites.

    ``regional`` is a list of ``(mask, cond)`` with ``mask`` a bool tensor over
    query positions. Returns the output-projected features.
    """
    h = attention_core(params, prefix, x, global_cond, trace)
    for mask, cond in regional:
        keep = mask[:, None].to(x.dtype)
        h_i = attention_core(params, prefix, x * keep, cond, trace)
        h = torch.where(mask[:, None], h_i, h)
    return linear(params, f"{prefix}.out", h, trace)


def _overlap_messages(masks: Sequence[np.ndarray]) -> list[str]:
    msgs = []
    claimed = np.zeros_like(masks[0], dtype=bool) if masks else None
    for i, m in enumerate(masks):
        clash = claimed & m
        if clash.any():
            msgs.append(f"region {i} overlaps earlier regions at {int(clash.sum())} positions; region {i} wins")
        claimed |= m
    return msgs


def cross_attention(z, ctx: AttentionContext, projections: dict, return_weights: bool = False):
    """``softmax(Q(z) K(c)^T / sqrt(d)) V(c)`` followed by the output projection.

    ``z`` is ``(positions, d_latent)``; ``projections`` maps ``q``/``k``/``v``/``out``
    to matrices.
    """
    z = np.asarray(z, dtype=np.float64)
    params = _projection_params(projections, ctx.head_dim, z.shape[-1], ctx.keys_source.shape[-1])
    probe = _AttentionProbe()
    with torch.no_grad():
        h = attention_core(params, "x", torch.as_tensor(z), torch.as_tensor(ctx.keys_source), probe)
        out = linear(params, "x.out", h, probe).numpy().copy()
    return (out, probe.weights[0]) if return_weights else out


def region_aware_attention(z, global_ctx: AttentionContext, regions: Sequence[RegionSpec],
                           projections: dict) -> RegionAttentionOutput:
    """Cross-attention whose output at each region's positions comes from that region's prompt.

    Regions are applied in order; where masks overlap the later region wins
    and a message is recorded in ``warnings`` (an :class:`OverlapWarning` is
    also issued).
    """
    z = np.asarray(z, dtype=np.float64)
    params = _projection_params(projections, global_ctx.head_dim, z.shape[-1], global_ctx.keys_source.shape[-1])
    regional = []
    masks = []
    for r in regions:
        if not isinstance(r.prompt, AttentionContext):
            raise TypeError("region prompts must be AttentionContext instances here")
        flat = r.flat()
        if flat.shape[0] != z.shape[0]:
            raise ShapeError(f"mask covers {flat.shape[0]} positions, latent has {z.shape[0]}")
        masks.append(flat)
        regional.append((torch.as_tensor(flat), torch.as_tensor(r.prompt.keys_source)))
    msgs = _overlap_messages(masks)
    for m in msgs:
        warnings.warn(m, OverlapWarning, stacklevel=2)
    probe = _AttentionProbe()
    with torch.no_grad():
        out = regional_attention_t(params, "x", torch.as_tensor(z), torch.as_tensor(global_ctx.keys_source),
                                   regional, probe)
    return RegionAttentionOutput(out.numpy().copy(), probe.weights, msgs)


def make_region_cross_attention(regional_prompts):
    """Cross-attention hook for :func:`toy_diffusion.predict_noise`.

    ``regional_prompts`` is a list of ``(mask, prompt_layers)`` with raw
    layer-wise embeddings; they are text-encoded with the live parameters.
    """

    def hook(params, block, x, cond, trace):
        regional = []
        for mask, layers in regional_prompts:
            c = encode_text(params, layers[block], trace)
            if c.shape[0] != x.shape[0]:
                c = c.expand(x.shape[0], -1, -1)
            regional.append((mask, c))
        return regional_attention_t(params, f"unet.b{block}.attn2", x, cond[block], regional, trace)

    return hook


def sample_with_regions(weights: ModelWeights, global_prompt, regions: Sequence[RegionSpec],
                        table: ModelWeights | None = None, schedule: NoiseSchedule | None = None,
                        steps: int = 20, rng_seed: int = 0, trace: Trace | None = None) -> np.ndarray:
    """Seeded reverse sampling with every cross-attention made region-aware.

    Prompts are resolved against ``table``'s vocabulary and registered
    concepts (``weights`` itself when omitted).
    """
    cfg = weights.config
    table = table or weights
    schedule = schedule or NoiseSchedule.for_config(cfg)
    glob = prompt_to_torch(build_prompt(global_prompt, table), cfg)
    masks = []
    regional = []
    for r in regions:
        flat = r.flat()
        if flat.shape[0] != cfg.positions:
            raise ShapeError(f"mask covers {flat.shape[0]} positions, latent has {cfg.positions}")
        masks.append(flat)
        regional.append((torch.as_tensor(flat), prompt_to_torch(build_prompt(r.prompt, table), cfg)))
    for m in _overlap_messages(masks):
        warnings.warn(m, OverlapWarning, stacklevel=2)
    z = torch.as_tensor(initial_latents(cfg, rng_seed))
    kwargs = {"trace": trace} if trace is not None else {}
    if regional:
        kwargs["cross_attention"] = make_region_cross_attention(regional)
    with torch.no_grad():
        out = ddim_loop(to_torch(weights.layers), cfg, schedule, z, glob, steps, **kwargs)
    return out[0].numpy().copy()
