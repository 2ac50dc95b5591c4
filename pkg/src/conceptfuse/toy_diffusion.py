"""A miniature text-conditioned diffusion denoiser.

The network is deliberately small: a one-block text encoder turns layer-wise
prompt embeddings into conditioning tokens, and a two-block transformer over
the 8x8 latent grid predicts the noise. Every projection inside an attention
module or feed-forward layer is a plain matrix with no bias, so low-rank
adapters can target it directly.

Weights live as float64 numpy arrays in :class:`ModelWeights`. The forward
pass itself runs in torch so that tuning gets gradients for free.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NumericalDivergence, ShapeError


@dataclass(frozen=True)
class ModelConfig:
    height: int = 8
    width: int = 8
    channels: int = 1
    d_latent: int = 16
    d_text: int = 16
    head_dim: int = 16
    blocks: int = 2
    ff_hidden: int = 32
    max_tokens: int = 16
    num_steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)

    @property
    def positions(self) -> int:
        return self.height * self.width

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        ab = np.asarray(self.alpha_bars, dtype=np.float64)
        if b.ndim != 1 or b.shape != ab.shape or b.size == 0:
            raise ShapeError("betas and alpha_bars must be matching non-empty 1-D arrays")
        if not (np.all(b > 0) and np.all(b < 1)):
            raise ValueError("every beta must lie in (0, 1)")
        if not (ab[0] < 1 and np.all(np.diff(ab) < 0)):
            raise ValueError("alpha_bars must start below 1 and decrease strictly")
        object.__setattr__(self, "betas", b)
        object.__setattr__(self, "alpha_bars", ab)

    @property
    def num_steps(self) -> int:
        return len(self.betas)

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        return cls(betas, np.cumprod(1.0 - betas))

    @classmethod
    def linear(cls, num_steps: int = 50, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        """Linear betas, rescaled so that the schedule spans the same noise
        levels as the 1000-step schedule it is quoted for."""
        scale = 1000.0 / num_steps
        return cls.from_betas(np.linspace(beta_start * scale, beta_end * scale, num_steps))

    @classmethod
    def for_config(cls, cfg: ModelConfig) -> "NoiseSchedule":
        return cls.linear(cfg.num_steps, cfg.beta_start, cfg.beta_end)


@dataclass
class ModelWeights:
    """Named weight matrices plus the token table they were trained with.

    ``vocab`` maps ordinary tokens to ``d_text`` vectors. ``concepts`` holds
    registered concept embeddings (``adapter.DecomposedEmbedding``) keyed by
    concept token.
    """

    layers: dict[str, np.ndarray]
    config: ModelConfig
    vocab: dict[str, np.ndarray] = field(default_factory=dict)
    concepts: dict = field(default_factory=dict)

    def copy(self) -> "ModelWeights":
        return ModelWeights(
            {k: v.copy() for k, v in self.layers.items()},
            self.config,
            {k: v.copy() for k, v in self.vocab.items()},
            dict(self.concepts),
        )

    def with_layers(self, updates: dict[str, np.ndarray]) -> "ModelWeights":
        layers = dict(self.layers)
        for name, value in updates.items():
            if name not in layers:
                raise KeyError(name)
            if value.shape != layers[name].shape:
                raise ShapeError(f"{name}: expected {layers[name].shape}, got {value.shape}")
            layers[name] = value
        return replace(self, layers=layers, vocab=dict(self.vocab), concepts=dict(self.concepts))

    def fingerprint(self) -> int:
        """64-bit content hash of the config, layers and base vocabulary."""
        h = hashlib.blake2b(digest_size=8)
        h.update(repr(sorted(self.config.to_dict().items())).encode())
        for name, arr in self.layers.items():
            h.update(name.encode() + b"\0" + repr(arr.shape).encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        for tok in sorted(self.vocab):
            h.update(tok.encode() + b"\0")
            h.update(np.ascontiguousarray(self.vocab[tok], dtype="<f8").tobytes())
        return int.from_bytes(h.digest(), "little")


# ---------------------------------------------------------------------------
# layer layout


def attention_names(prefix: str) -> list[str]:
    return [f"{prefix}.{p}" for p in ("q", "k", "v", "out")]


def lora_target_names(cfg: ModelConfig) -> list[str]:
    names = attention_names("text.attn")
    for b in range(cfg.blocks):
        names += attention_names(f"unet.b{b}.attn1")
        names += attention_names(f"unet.b{b}.attn2")
        names += [f"unet.b{b}.ff1", f"unet.b{b}.ff2"]
    return names


def is_text_encoder_layer(name: str) -> bool:
    return name.startswith("text.")


def layer_shapes(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    d, dz, dt = cfg.head_dim, cfg.d_latent, cfg.d_text
    shapes: dict[str, tuple[int, int]] = {
        "text.pos": (cfg.max_tokens, dt),
        "text.attn.q": (d, dt),
        "text.attn.k": (d, dt),
        "text.attn.v": (d, dt),
        "text.attn.out": (dt, d),
        "unet.in": (dz, cfg.channels),
        "unet.pos": (cfg.positions, dz),
    }
    for b in range(cfg.blocks):
        p = f"unet.b{b}"
        shapes.update({
            f"{p}.attn1.q": (d, dz),
            f"{p}.attn1.k": (d, dz),
            f"{p}.attn1.v": (d, dz),
            f"{p}.attn1.out": (dz, d),
            f"{p}.attn2.q": (d, dz),
            f"{p}.attn2.k": (d, dt),
            f"{p}.attn2.v": (d, dt),
            f"{p}.attn2.out": (dz, d),
            f"{p}.ff1": (cfg.ff_hidden, dz),
            f"{p}.ff2": (dz, cfg.ff_hidden),
        })
    shapes["unet.out"] = (cfg.channels, dz)
    return shapes


def init_weights(cfg: ModelConfig = ModelConfig(), seed: int = 0, vocab: Sequence[str] = (),
                 embed_scale: float = 0.02) -> ModelWeights:
    """Fresh random weights (fan-in scaled normal) and a random token table."""
    rng = np.random.default_rng(seed)
    layers = {}
    for name, (rows, cols) in layer_shapes(cfg).items():
        if name.endswith(".pos"):
            std = 0.02 if name.startswith("text.") else 0.5
        elif name == "unet.out":
            std = 0.1 / math.sqrt(cols)
        elif name.endswith(".out") and name.startswith("unet.b"):
            std = 0.5 / math.sqrt(cols)
        else:
            std = 1.0 / math.sqrt(cols)
        layers[name] = rng.normal(0.0, std, size=(rows, cols))
    table = {tok: rng.normal(0.0, embed_scale, size=cfg.d_text) for tok in vocab}
    return ModelWeights(layers, cfg, table)


# ---------------------------------------------------------------------------
# forward pass (torch)

PromptEmbedding = list  # one (tokens, d_text) array per block


class Trace:
    """Observer hooks for the forward pass; the default does nothing."""

    def linear(self, name: str, x: torch.Tensor, y: torch.Tensor) -> None:
        pass

    def attention(self, name: str, weights: torch.Tensor) -> None:
        pass

    def begin_step(self, index: int, t: int) -> None:
        pass


_NULL_TRACE = Trace()


def to_torch(layers: dict[str, np.ndarray]) -> dict[str, torch.Tensor]:
    return {k: torch.from_numpy(np.ascontiguousarray(v, dtype=np.float64)) for k, v in layers.items()}


def linear(params, name, x, trace):
    y = x @ params[name].T
    trace.linear(name, x, y)
    return y


def rms_norm(x: torch.Tensor) -> torch.Tensor:
    # no mean subtraction, so normalized activations can have full rank
    return x * torch.rsqrt(torch.mean(x * x, dim=-1, keepdim=True) + 1e-5)


def attention_core(params, prefix, x_q, x_kv, trace):
    """``softmax(Q K^T / sqrt(d)) V`` before the output projection."""
    q = linear(params, f"{prefix}.q", x_q, trace)
    k = linear(params, f"{prefix}.k", x_kv, trace)
    v = linear(params, f"{prefix}.v", x_kv, trace)
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    w = torch.softmax(scores, dim=-1)
    trace.attention(prefix, w)
    return w @ v


def attention(params, prefix, x_q, x_kv, trace):
    return linear(params, f"{prefix}.out", attention_core(params, prefix, x_q, x_kv, trace), trace)


def encode_text(params, emb: torch.Tensor, trace=_NULL_TRACE) -> torch.Tensor:
    """Text encoder: positional add, one pre-norm self-attention, final norm."""
    n = emb.shape[-2]
    x = emb + params["text.pos"][:n]
    h = rms_norm(x)
    x = x + attention(params, "text.attn", h, h, trace)
    return rms_norm(x)


def timestep_features(t: torch.Tensor, dim: int, num_steps: int) -> torch.Tensor:
    """Sinusoidal features of the timestep, periods from 2*pi up to ~2*pi*num_steps."""
    half = dim // 2
    freqs = torch.exp(-math.log(num_steps) * torch.arange(half, dtype=torch.float64) / half)
    angle = t.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(angle), torch.cos(angle)], dim=-1)


CrossAttentionFn = Callable[..., torch.Tensor]


def default_cross_attention(params, block, x, cond, trace):
    return attention(params, f"unet.b{block}.attn2", x, cond[block], trace)


def predict_noise(params, cfg: ModelConfig, z_t: torch.Tensor, t: torch.Tensor, prompt_layers,
                  trace: Trace = _NULL_TRACE, cross_attention: CrossAttentionFn = default_cross_attention):
    """Noise prediction for a batch of latents.

    ``z_t`` is ``(B, H, W, C)``, ``t`` a length-``B`` integer tensor, and
    ``prompt_layers`` a list of ``(B or 1, tokens, d_text)`` raw embeddings,
    one per block. ``cross_attention`` can be swapped to change how the
    conditioning enters the latent stream.
    """
    batch = z_t.shape[0]
    cond = [encode_text(params, e, trace) for e in prompt_layers]
    cond = [c.expand(batch, -1, -1) if c.shape[0] != batch else c for c in cond]
    tokens = z_t.reshape(batch, cfg.positions, cfg.channels)
    h = tokens @ params["unet.in"].T + params["unet.pos"]
    h = h + timestep_features(t, cfg.d_latent, cfg.num_steps)[:, None, :]
    for b in range(cfg.blocks):
        p = f"unet.b{b}"
        x = rms_norm(h)
        h = h + attention(params, f"{p}.attn1", x, x, trace)
        x = rms_norm(h)
        h = h + cross_attention(params, b, x, cond, trace)
        x = rms_norm(h)
        h = h + linear(params, f"{p}.ff2", F.gelu(linear(params, f"{p}.ff1", x, trace)), trace)
    out = h @ params["unet.out"].T
    return out.reshape(z_t.shape)


def prompt_to_torch(prompt: PromptEmbedding, cfg: ModelConfig) -> list[torch.Tensor]:
    if len(prompt) != cfg.blocks:
        raise ShapeError(f"prompt has {len(prompt)} layers, model has {cfg.blocks} blocks")
    out = []
    for e in prompt:
        t = torch.as_tensor(np.asarray(e, dtype=np.float64))
        if t.ndim == 2:
            t = t[None]
        if t.shape[-1] != cfg.d_text:
            raise ShapeError(f"prompt token width {t.shape[-1]} != d_text {cfg.d_text}")
        if t.shape[-2] > cfg.max_tokens:
            raise ShapeError(f"prompt has {t.shape[-2]} tokens, limit is {cfg.max_tokens}")
        out.append(t)
    if len({t.shape[-2] for t in out}) != 1:
        raise ShapeError("token counts differ across prompt layers")
    return out


# ---------------------------------------------------------------------------
# diffusion


def _check_latent(z, cfg: ModelConfig | None = None, name="latent") -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3:
        raise ShapeError(f"{name} must be (height, width, channels), got {z.shape}")
    if cfg is not None and z.shape != cfg.latent_shape:
        raise ShapeError(f"{name} shape {z.shape} != model latent shape {cfg.latent_shape}")
    return z


def forward_noise(z0, t: int, eps, schedule: NoiseSchedule) -> np.ndarray:
    """``sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ShapeError(f"z0 {z0.shape} and eps {eps.shape} differ")
    if not 0 <= t < schedule.num_steps:
        raise ValueError(f"t={t} outside [0, {schedule.num_steps})")
    ab = schedule.alpha_bars[t]
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def apply_noise_offset(eps, offset: float, rng_seed) -> np.ndarray:
    """Shift ``eps`` by ``offset * u`` with one standard-normal ``u`` per sample.

    ``eps`` is a single ``(H, W, C)`` latent or a ``(B, H, W, C)`` batch. ``rng_seed``
    may be an int or a ``numpy.random.Generator``.
    """
    if offset < 0:
        raise ValueError("noise offset must be >= 0")
    eps = np.asarray(eps, dtype=np.float64)
    rng = np.random.default_rng(rng_seed)
    if eps.ndim == 3:
        return eps + offset * rng.standard_normal()
    u = rng.standard_normal(eps.shape[0])
    return eps + offset * u.reshape((-1,) + (1,) * (eps.ndim - 1))


def draw_training_noise(rng: np.random.Generator, batch: int, cfg: ModelConfig, schedule: NoiseSchedule,
                        noise_offset: float = 0.0):
    t = rng.integers(0, schedule.num_steps, size=batch)
    eps = rng.standard_normal((batch,) + cfg.latent_shape)
    if noise_offset:
        eps = apply_noise_offset(eps, noise_offset, rng)
    return t, eps


def diffusion_loss_t(params, cfg, schedule, z0: torch.Tensor, prompt_layers, t: np.ndarray, eps: np.ndarray,
                     cross_attention: "CrossAttentionFn" = default_cross_attention):
    """Mean squared noise-prediction error as a differentiable torch scalar."""
    ab = torch.as_tensor(schedule.alpha_bars[t])[:, None, None, None]
    eps_t = torch.as_tensor(eps)
    z_t = ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps_t
    pred = predict_noise(params, cfg, z_t, torch.as_tensor(t), prompt_layers, cross_attention=cross_attention)
    return torch.mean((eps_t - pred) ** 2)


def denoise_loss(weights: ModelWeights, z0, prompt: PromptEmbedding, schedule: NoiseSchedule,
                 rng_seed: int, noise_offset: float = 0.0) -> float:
    """One seeded draw of the denoising objective ``||eps - eps_hat(z_t, t, c)||^2``."""
    cfg = weights.config
    z0 = _check_latent(z0, cfg, "z0")
    rng = np.random.default_rng(rng_seed)
    t, eps = draw_training_noise(rng, 1, cfg, schedule, noise_offset)
    with torch.no_grad():
        loss = diffusion_loss_t(to_torch(weights.layers), cfg, schedule, torch.as_tensor(z0)[None],
                                prompt_to_torch(prompt, cfg), t, eps)
    value = float(loss)
    if not math.isfinite(value):
        raise NumericalDivergence("non-finite denoising loss")
    return value


def sampling_timesteps(schedule: NoiseSchedule, steps: int) -> list[int]:
    if steps < 1:
        raise ValueError("steps must be >= 1")
    grid = np.linspace(schedule.num_steps - 1, 0, min(steps, schedule.num_steps))
    return [int(round(v)) for v in grid]


def ddim_loop(params, cfg, schedule, z: torch.Tensor, prompt_layers, steps: int,
              trace: Trace = _NULL_TRACE, cross_attention: CrossAttentionFn = default_cross_attention):
    """Deterministic reverse iteration starting from ``z`` at the last timestep."""
    ts = sampling_timesteps(schedule, steps)
    ab = schedule.alpha_bars
    for i, t in enumerate(ts):
        trace.begin_step(i, t)
        tt = torch.full((z.shape[0],), t, dtype=torch.long)
        eps = predict_noise(params, cfg, z, tt, prompt_layers, trace, cross_attention)
        z0_hat = (z - math.sqrt(1.0 - ab[t]) * eps) / math.sqrt(ab[t])
        if i + 1 < len(ts):
            nxt = ts[i + 1]
            z = math.sqrt(ab[nxt]) * z0_hat + math.sqrt(1.0 - ab[nxt]) * eps
        else:
            z = z0_hat
        if not torch.all(torch.isfinite(z)):
            raise NumericalDivergence(f"latent became non-finite at timestep {t}")
    return z


def initial_latents(cfg: ModelConfig, rng_seed, batch: int = 1) -> np.ndarray:
    rng = np.random.default_rng(rng_seed)
    return rng.standard_normal((batch,) + cfg.latent_shape)


def sample_reverse(weights: ModelWeights, prompt: PromptEmbedding, schedule: NoiseSchedule,
                   steps: int = 20, rng_seed: int = 0) -> np.ndarray:
    """Seeded deterministic sample; returns an ``(H, W, C)`` latent."""
    cfg = weights.config
    z = torch.as_tensor(initial_latents(cfg, rng_seed))
    with torch.no_grad():
        out = ddim_loop(to_torch(weights.layers), cfg, schedule, z, prompt_to_torch(prompt, cfg), steps)
    return out[0].numpy().copy()
