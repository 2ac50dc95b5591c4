"""Single-client concept tuning of an embedding-decomposed LoRA adapter."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .adapter import DEFAULT_RANK, ConceptAdapter, DecomposedEmbedding, LoraLayer, init_decomposed_embedding
from .errors import ShapeError, TuningDiverged, UnknownToken
from .toy_diffusion import (
    ModelWeights,
    NoiseSchedule,
    apply_noise_offset,
    diffusion_loss_t,
    draw_training_noise,
    is_text_encoder_layer,
    lora_target_names,
)

__all__ = [
    "ConceptDataset",
    "TuningConfig",
    "apply_noise_offset",
    "tune_concept",
    "concept_loss",
]


@dataclass
class ConceptDataset:
    images: list[np.ndarray]
    caption_template: list[str]
    concept_name: str
    class_token: str | None = None

    def __post_init__(self):
        self.images = [np.asarray(img, dtype=np.float64) for img in self.images]
        if isinstance(self.caption_template, str):
            self.caption_template = self.caption_template.split()
        if not self.images:
            raise ValueError("a concept dataset needs at least one image")
        shapes = {img.shape for img in self.images}
        if len(shapes) != 1:
            raise ShapeError(f"images have differing shapes: {sorted(shapes)}")


@dataclass
class TuningConfig:
    steps: int = 2000
    lr_embedding: float = 1e-3
    lr_encoder_lora: float = 1e-5
    lr_denoiser_lora: float = 1e-4
    noise_offset: float = 0.01
    rank: int = DEFAULT_RANK
    rng_seed: int = 0
    rand_scale: float = 0.02
    lora_init_std: float | None = None  # None: 1/sqrt(fan_in)
    targets: Sequence[str] | None = None  # None: every LoRA-targetable layer

    def __post_init__(self):
        for name in ("lr_embedding", "lr_encoder_lora", "lr_denoiser_lora"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.noise_offset < 0:
            raise ValueError("noise_offset must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")

    def snapshot(self) -> dict:
        d = asdict(self)
        d["targets"] = None if self.targets is None else list(self.targets)
        return d


def _class_vector(base: ModelWeights, data: ConceptDataset) -> np.ndarray:
    if data.class_token is None:
        return np.mean(np.stack(list(base.vocab.values())), axis=0)
    if data.class_token not in base.vocab:
        raise UnknownToken(data.class_token)
    return base.vocab[data.class_token]


def _prompt_layers(tokens, base: ModelWeights, concept: str, v_rand, v_class):
    """Layer-wise prompt tensors with the concept's sub-tokens as live tensors."""
    layers = []
    for layer in range(base.config.blocks):
        rows = []
        for tok in tokens:
            if tok == concept:
                rows += [v_rand[layer], v_class[layer]]
            elif tok in base.vocab:
                rows.append(torch.as_tensor(base.vocab[tok]))
            else:
                raise UnknownToken(tok)
        layers.append(torch.stack(rows)[None])
    return layers


@dataclass
class _Trainables:
    v_rand: torch.Tensor
    v_class: torch.Tensor
    B: dict[str, torch.Tensor] = field(default_factory=dict)
    A: dict[str, torch.Tensor] = field(default_factory=dict)
    scale: float = 1.0


def _effective_params(base_params, tr: _Trainables):
    params = dict(base_params)
    for name in tr.B:
        params[name] = base_params[name] + tr.scale * (tr.B[name] @ tr.A[name])
    return params


def build_optimizer(tr: _Trainables, cfg: TuningConfig) -> torch.optim.Adam:
    """Adam with one parameter group each for embedding, text-encoder LoRA and denoiser LoRA."""
    enc = [t for n in tr.B for t in (tr.B[n], tr.A[n]) if is_text_encoder_layer(n)]
    den = [t for n in tr.B for t in (tr.B[n], tr.A[n]) if not is_text_encoder_layer(n)]
    groups = [
        {"name": "embedding", "params": [tr.v_rand, tr.v_class], "lr": cfg.lr_embedding},
        {"name": "encoder_lora", "params": enc, "lr": cfg.lr_encoder_lora},
        {"name": "denoiser_lora", "params": den, "lr": cfg.lr_denoiser_lora},
    ]
    return torch.optim.Adam(groups, betas=(0.9, 0.999), eps=1e-8)


def _to_adapter(tr: _Trainables, base: ModelWeights, data: ConceptDataset, cfg: TuningConfig,
                metadata: dict) -> ConceptAdapter:
    lora = {
        n: LoraLayer(n, tr.B[n].detach().numpy().copy(), tr.A[n].detach().numpy().copy(), tr.scale)
        for n in tr.B
    }
    emb = DecomposedEmbedding(data.concept_name, tr.v_rand.detach().numpy().copy(),
                              tr.v_class.detach().numpy().copy())
    return ConceptAdapter(lora, emb, base.fingerprint(), metadata)


def concept_loss(weights: ModelWeights, data: ConceptDataset, draws: int = 16, seed: int = 12345,
                 noise_offset: float = 0.0, extra_concepts=()) -> float:
    """Denoising loss on the dataset averaged over a fixed set of noise draws.

    ``weights`` must resolve the caption (e.g. the base with the adapter applied).
    """
    from .adapter import build_prompt
    from .toy_diffusion import prompt_to_torch, to_torch

    cfg = weights.config
    schedule = NoiseSchedule.for_config(cfg)
    prompt = prompt_to_torch(build_prompt(data.caption_template, weights, extra_concepts), cfg)
    params = to_torch(weights.layers)
    z0 = torch.as_tensor(np.stack(data.images))
    rng = np.random.default_rng(seed)
    total = 0.0
    with torch.no_grad():
        for _ in range(draws):
            t, eps = draw_training_noise(rng, len(data.images), cfg, schedule, noise_offset)
            total += float(diffusion_loss_t(params, cfg, schedule, z0, prompt, t, eps))
    return total / draws


def tune_concept(base: ModelWeights, data: ConceptDataset, cfg: TuningConfig = TuningConfig(),
                 callback: Callable[[int, float, torch.optim.Optimizer], None] | None = None) -> ConceptAdapter:
    """Optimize one concept's embedding and LoRA factors against the denoising loss.

    The base weights are only read. Each step uses the whole dataset with a
    fresh timestep and noise draw per image. ``callback(step, loss, optimizer)``
    runs after every optimizer step.
    """
    tokens = list(data.caption_template)
    if tokens.count(data.concept_name) != 1:
        raise ValueError(f"concept token {data.concept_name!r} must appear exactly once in the caption")
    mcfg = base.config
    if data.images[0].shape != mcfg.latent_shape:
        raise ShapeError(f"images are {data.images[0].shape}, model expects {mcfg.latent_shape}")

    rng = np.random.default_rng(cfg.rng_seed)
    emb0 = init_decomposed_embedding(_class_vector(base, data), mcfg.blocks, rng, cfg.rand_scale,
                                     data.concept_name)
    tr = _Trainables(torch.tensor(emb0.v_rand, requires_grad=True), torch.tensor(emb0.v_class, requires_grad=True))
    targets = list(cfg.targets) if cfg.targets is not None else lora_target_names(mcfg)
    for name in targets:
        d, k = base.layers[name].shape
        std = cfg.lora_init_std if cfg.lora_init_std is not None else 1.0 / math.sqrt(k)
        tr.B[name] = torch.zeros((d, cfg.rank), dtype=torch.float64, requires_grad=True)
        tr.A[name] = torch.tensor(rng.normal(0.0, std, size=(cfg.rank, k)), requires_grad=True)

    schedule = NoiseSchedule.for_config(mcfg)
    base_params = {k: torch.tensor(v) for k, v in base.layers.items()}
    z0 = torch.as_tensor(np.stack(data.images))
    opt = build_optimizer(tr, cfg)
    ema = None
    first = None
    for step in range(cfg.steps):
        t, eps = draw_training_noise(rng, len(data.images), mcfg, schedule, cfg.noise_offset)
        prompt = _prompt_layers(tokens, base, data.concept_name, tr.v_rand, tr.v_class)
        loss = diffusion_loss_t(_effective_params(base_params, tr), mcfg, schedule, z0, prompt, t, eps)
        value = loss.item()
        if not math.isfinite(value):
            raise TuningDiverged(step, value, _to_adapter(tr, base, data, cfg, {}))
        opt.zero_grad()
        loss.backward()
        opt.step()
        first = value if first is None else first
        ema = value if ema is None else 0.98 * ema + 0.02 * value
        if callback is not None:
            callback(step, value, opt)

    meta = {"concept": data.concept_name, "caption": " ".join(tokens), "class_token": data.class_token,
            "tuning": cfg.snapshot()}
    if first is not None:
        meta["first_loss"] = first
        meta["final_running_loss"] = ema
    return _to_adapter(tr, base, data, cfg, meta)
