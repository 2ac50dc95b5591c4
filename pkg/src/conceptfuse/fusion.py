"""Center-node fusion of several concept adapters into one model.

Two update rules are provided. Weight fusion adds a convex combination of
the adapters' deltas. Gradient fusion instead chooses, layer by layer, the
weight that best reproduces every concept's own layer outputs on activations
recorded while sampling that concept:

    W = argmin_W  sum_i || (W0 + dW_i) X_i - W X_i ||_F^2

which, written for the deviation D = W - W0 with G_i = X_i X_i^T, is the
quadratic tr(D G D^T) - 2 tr(D C^T) + const with G = sum G_i and
C = sum dW_i G_i. The closed form takes the minimum-norm solution C G^+;
the iterative route runs L-BFGS from D = 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from .adapter import ConceptAdapter, DecomposedEmbedding, apply_adapter, build_prompt, check_compatible, merge_delta
from .errors import EmptyFusion, ShapeError, TokenCollision, WeightNormalizationError
from .solvers import QuadraticObjective, as_matrix, lbfgs_minimize, pseudoinverse
from .toy_diffusion import (
    ModelWeights,
    NoiseSchedule,
    Trace,
    ddim_loop,
    initial_latents,
    is_text_encoder_layer,
    prompt_to_torch,
    to_torch,
)

CLOSED_FORM = "closed_form"
ITERATIVE = "iterative"


# ---------------------------------------------------------------------------
# weight fusion


def equal_weights(n: int) -> list[float]:
    return [1.0 / n] * n


def merge_embedding_tables(base_table: Mapping[str, np.ndarray],
                           embeddings: Sequence[DecomposedEmbedding]) -> dict:
    """Union of the base vocabulary and the concept embeddings.

    Concept tokens map to their :class:`DecomposedEmbedding`; every concept
    name must be new.
    """
    table: dict = dict(base_table)
    owner = {tok: "base vocabulary" for tok in base_table}
    for i, emb in enumerate(embeddings):
        name = emb.concept_name
        who = f"concept embedding #{i}"
        if name in owner:
            raise TokenCollision(name, owner[name], who)
        owner[name] = who
        table[name] = emb
    return table


def _register_concepts(model: ModelWeights, adapters: Sequence[ConceptAdapter]) -> ModelWeights:
    existing = [e for e in model.concepts.values()]
    merged = merge_embedding_tables(model.vocab, existing + [a.embedding for a in adapters])
    model.concepts = {k: v for k, v in merged.items() if isinstance(v, DecomposedEmbedding)}
    return model


def weight_fuse(base: ModelWeights, adapters: Sequence[ConceptAdapter],
                weights: Sequence[float] | None = None) -> ModelWeights:
    """``W0 + sum_i w_i dW_i`` on every targeted layer; weights must sum to one."""
    if not adapters:
        raise EmptyFusion("no adapters to fuse")
    weights = equal_weights(len(adapters)) if weights is None else list(weights)
    if len(weights) != len(adapters):
        raise WeightNormalizationError(f"{len(weights)} weights for {len(adapters)} adapters")
    if abs(sum(weights) - 1.0) > 1e-9:
        raise WeightNormalizationError(f"fusion weights sum to {sum(weights)!r}, expected 1")
    for a in adapters:
        check_compatible(base, a)
    total: dict[str, np.ndarray] = {}
    for w, a in zip(weights, adapters):
        for name, layer in a.lora_layers.items():
            total[name] = total.get(name, 0.0) + w * merge_delta(layer)
    fused = base.with_layers({name: base.layers[name] + d for name, d in total.items()})
    return _register_concepts(fused, adapters)


# ---------------------------------------------------------------------------
# activation capture

CAPTURE_TEMPLATES = (
    "a photo of {c}",
    "a picture of {c} in the top left",
    "a scene with dim {c} and bright ring",
    "the {c} with square in the bottom right",
)


def default_capture_prompts(adapter: ConceptAdapter) -> list[list[str]]:
    """The tuning caption (when recorded) plus caption variations, four prompts in all."""
    c = adapter.concept_name
    prompts = [t.format(c=c).split() for t in CAPTURE_TEMPLATES]
    caption = adapter.metadata.get("caption")
    if caption:
        caption = caption.split() if isinstance(caption, str) else list(caption)
        prompts = [caption] + [p for p in prompts if p != caption][:3]
    return prompts


@dataclass
class ActivationBatch:
    """Per-layer inputs ``X`` (k x N, one column per activation) and outputs ``Y`` (d x N)."""

    concept_id: str
    per_layer: dict[str, np.ndarray]
    per_layer_targets: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, y in self.per_layer_targets.items():
            if name in self.per_layer and y.shape[1] != self.per_layer[name].shape[1]:
                raise ShapeError(f"{name}: {self.per_layer[name].shape[1]} inputs vs {y.shape[1]} outputs")

    def columns(self, name: str) -> int:
        return self.per_layer[name].shape[1]

    def gram(self, name: str) -> np.ndarray:
        x = self.per_layer[name]
        return x @ x.T


class _Recorder(Trace):
    def __init__(self, names, stride: int):
        self.names = set(names)
        self.stride = stride
        self.active = True
        self.xs: dict[str, list] = {n: [] for n in names}
        self.ys: dict[str, list] = {n: [] for n in names}

    def begin_step(self, index: int, t: int) -> None:
        self.active = index % self.stride == 0

    def linear(self, name, x, y):
        if self.active and name in self.names:
            self.xs[name].append(x.detach().reshape(-1, x.shape[-1]).numpy().T.copy())
            self.ys[name].append(y.detach().reshape(-1, y.shape[-1]).numpy().T.copy())


def capture_activations(base: ModelWeights, adapter: ConceptAdapter, prompts: Sequence,
                        samples_per_prompt: int = 4, schedule: NoiseSchedule | None = None,
                        steps: int = 10, rng_seed: int = 0, stride: int = 1) -> ActivationBatch:
    """Sample the concept with its own adapter and record every targeted layer's inputs and outputs."""
    if samples_per_prompt < 1:
        raise ValueError("samples_per_prompt must be >= 1")
    if not prompts:
        raise ValueError("at least one capture prompt is needed")
    model = apply_adapter(base, adapter)
    cfg = model.config
    schedule = schedule or NoiseSchedule.for_config(cfg)
    rec = _Recorder(adapter.lora_layers, stride)
    params = to_torch(model.layers)
    rng = np.random.default_rng(rng_seed)
    with torch.no_grad():
        for prompt in prompts:
            # one text-encoder pass per sample so every layer's count scales with samples
            cond = [c.expand(samples_per_prompt, -1, -1).clone()
                    for c in prompt_to_torch(build_prompt(prompt, model), cfg)]
            z = torch.as_tensor(initial_latents(cfg, rng, samples_per_prompt))
            ddim_loop(params, cfg, schedule, z, cond, steps, trace=rec)
    xs = {n: np.concatenate(v, axis=1) for n, v in rec.xs.items() if v}
    ys = {n: np.concatenate(v, axis=1) for n, v in rec.ys.items() if v}
    return ActivationBatch(adapter.concept_name, xs, ys)


# ---------------------------------------------------------------------------
# gradient fusion


@dataclass
class LayerFusion:
    weight: np.ndarray
    residual: float
    shares: list[float]
    iterations: int


def fusion_objective(W, W0, deltas: Sequence[np.ndarray], activations: Sequence[np.ndarray]) -> float:
    """``sum_i ||(W0 + dW_i) X_i - W X_i||_F^2`` evaluated directly on the activations."""
    return float(sum(np.sum(((W0 + d) @ x - W @ x) ** 2) for d, x in zip(deltas, activations)))


def fuse_layer_from_grams(W0, deltas: Sequence[np.ndarray], grams: Sequence[np.ndarray], mode: str = CLOSED_FORM,
                          iters: int = 500, tol: float = 1e-12) -> LayerFusion:
    """Solve one layer's fusion problem given per-concept Gram matrices ``X_i X_i^T``."""
    if len(deltas) == 0:
        raise EmptyFusion("no concepts to fuse")
    if len(deltas) != len(grams):
        raise ShapeError(f"{len(deltas)} deltas but {len(grams)} activation sets")
    W0 = as_matrix(W0, "W0")
    d, k = W0.shape
    deltas = [as_matrix(x, "delta") for x in deltas]
    grams = [as_matrix(g, "gram") for g in grams]
    for dw, g in zip(deltas, grams):
        if dw.shape != (d, k):
            raise ShapeError(f"delta {dw.shape} does not match W0 {W0.shape}")
        if g.shape != (k, k):
            raise ShapeError(f"activations have {g.shape[0]} rows, W0 expects {k}")
    G = sum(grams)
    C = sum(dw @ g for dw, g in zip(deltas, grams))
    const = sum(float(np.sum((dw @ g) * dw)) for dw, g in zip(deltas, grams))
    iterations = 0
    if mode == CLOSED_FORM:
        D = C @ pseudoinverse(G)
    elif mode == ITERATIVE:
        # a positive rescale leaves the minimizer unchanged and keeps the numbers O(1)
        scale = max(float(np.trace(G)) / k, 1e-300)
        obj = QuadraticObjective(0.5 * (G + G.T) / scale, C / scale, const / scale)
        D, info = lbfgs_minimize(obj.value, obj.grad, np.zeros((d, k)), steps=iters, tol=tol, return_info=True)
        iterations = info["iterations"]
    else:
        raise ValueError(f"unknown fusion mode {mode!r}")
    shares = [max(float(np.sum(((dw - D) @ g) * (dw - D))), 0.0) for dw, g in zip(deltas, grams)]
    return LayerFusion(W0 + D, float(sum(shares)), shares, iterations)


def gradient_fuse_layer(W0, deltas: Sequence[np.ndarray], activations: Sequence[np.ndarray],
                        mode: str = CLOSED_FORM, iters: int = 500) -> np.ndarray:
    """Fused weight for one layer from each concept's delta and input activations ``X_i`` (k x N_i)."""
    if len(deltas) == 0 or len(activations) == 0:
        raise EmptyFusion("no concepts to fuse")
    if len(deltas) != len(activations):
        raise ShapeError(f"{len(deltas)} deltas but {len(activations)} activation sets")
    grams = [as_matrix(x, "activations") @ as_matrix(x, "activations").T for x in activations]
    return fuse_layer_from_grams(W0, deltas, grams, mode, iters).weight


@dataclass
class FusionConfig:
    mode: str = CLOSED_FORM
    encoder_iters: int = 500
    denoiser_iters: int = 50
    tol: float = 1e-12


@dataclass
class FusionReport:
    method: str
    solver_kind: str | None = None
    per_layer_residual: dict[str, float] = field(default_factory=dict)
    per_concept_share: dict[str, float] = field(default_factory=dict)
    iterations_used: dict[str, int] = field(default_factory=dict)
    fusion_weights: dict[str, float] = field(default_factory=dict)

    @property
    def total_residual(self) -> float:
        return float(sum(self.per_layer_residual.values()))

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FusionReport":
        return cls(**json.loads(text))


def gradient_fuse_model(base: ModelWeights, adapters: Sequence[ConceptAdapter], batches: Sequence[ActivationBatch],
                        cfg: FusionConfig = FusionConfig()) -> tuple[ModelWeights, FusionReport]:
    """Layer-wise gradient fusion of every layer any adapter targets."""
    if not adapters:
        raise EmptyFusion("no adapters to fuse")
    if len(batches) != len(adapters):
        raise ShapeError(f"{len(batches)} activation batches for {len(adapters)} adapters")
    for a in adapters:
        check_compatible(base, a)
    names = []
    for a in adapters:
        names += [n for n in a.lora_layers if n not in names]
    ids = [a.concept_name for a in adapters]
    report = FusionReport("gradient", cfg.mode, per_concept_share={i: 0.0 for i in ids})
    updates = {}
    for name in names:
        deltas, grams, owners = [], [], []
        for a, batch in zip(adapters, batches):
            if name not in batch.per_layer:
                continue
            layer = a.lora_layers.get(name)
            deltas.append(merge_delta(layer) if layer is not None else np.zeros_like(base.layers[name]))
            grams.append(batch.gram(name))
            owners.append(a.concept_name)
        if not deltas:
            raise EmptyFusion(f"no activations were captured for layer {name!r}")
        iters = cfg.encoder_iters if is_text_encoder_layer(name) else cfg.denoiser_iters
        res = fuse_layer_from_grams(base.layers[name], deltas, grams, cfg.mode, iters, cfg.tol)
        updates[name] = res.weight
        report.per_layer_residual[name] = res.residual
        report.iterations_used[name] = res.iterations
        for owner, share in zip(owners, res.shares):
            report.per_concept_share[owner] += share
    fused = base.with_layers(updates)
    return _register_concepts(fused, adapters), report


def weight_fuse_report(adapters: Sequence[ConceptAdapter], weights: Sequence[float] | None = None) -> FusionReport:
    weights = equal_weights(len(adapters)) if weights is None else list(weights)
    return FusionReport("weight", fusion_weights={a.concept_name: float(w) for a, w in zip(adapters, weights)})
