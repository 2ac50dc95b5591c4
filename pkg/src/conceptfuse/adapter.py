"""Embedding-decomposed LoRA: low-rank layer deltas plus a layer-wise,
two-sub-token concept embedding."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import IncompatibleAdapter, ShapeError, UnknownToken
from .toy_diffusion import ModelWeights, PromptEmbedding

DEFAULT_RANK = 4


@dataclass
class LoraLayer:
    target_layer: str
    B: np.ndarray  # (d, r)
    A: np.ndarray  # (r, k)
    scale: float = 1.0

    def __post_init__(self):
        self.B = np.asarray(self.B, dtype=np.float64)
        self.A = np.asarray(self.A, dtype=np.float64)
        if self.B.ndim != 2 or self.A.ndim != 2 or self.B.shape[1] != self.A.shape[0]:
            raise ShapeError(f"{self.target_layer}: B {self.B.shape} and A {self.A.shape} do not chain")
        d, k = self.B.shape[0], self.A.shape[1]
        if self.rank > min(d, k):
            raise ShapeError(f"{self.target_layer}: rank {self.rank} exceeds min({d}, {k})")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.B.shape[0], self.A.shape[1])


@dataclass
class DecomposedEmbedding:
    """Per-layer ``(v_rand, v_class)`` pairs for one concept token."""

    concept_name: str
    v_rand: np.ndarray  # (layers, d_text)
    v_class: np.ndarray  # (layers, d_text)

    def __post_init__(self):
        self.v_rand = np.asarray(self.v_rand, dtype=np.float64)
        self.v_class = np.asarray(self.v_class, dtype=np.float64)
        if self.v_rand.ndim != 2 or self.v_rand.shape != self.v_class.shape:
            raise ShapeError("v_rand and v_class must both be (layers, d_text)")

    @property
    def layers(self) -> int:
        return self.v_rand.shape[0]

    def tokens_at(self, layer: int) -> np.ndarray:
        """The two sub-token rows used at ``layer``."""
        return np.stack([self.v_rand[layer], self.v_class[layer]])


@dataclass
class ConceptAdapter:
    lora_layers: dict[str, LoraLayer]
    embedding: DecomposedEmbedding
    base_fingerprint: int
    metadata: dict = field(default_factory=dict)

    @property
    def concept_name(self) -> str:
        return self.embedding.concept_name

    def deltas(self) -> dict[str, np.ndarray]:
        return {name: merge_delta(layer) for name, layer in self.lora_layers.items()}


def merge_delta(layer: LoraLayer) -> np.ndarray:
    """``scale * B @ A``."""
    if layer.B.shape[1] != layer.A.shape[0]:
        raise ShapeError(f"{layer.target_layer}: B {layer.B.shape} and A {layer.A.shape} do not chain")
    return layer.scale * (layer.B @ layer.A)


def check_compatible(base: ModelWeights, adapter: ConceptAdapter) -> None:
    if adapter.base_fingerprint != base.fingerprint():
        raise IncompatibleAdapter(
            f"adapter {adapter.concept_name!r} was tuned on base {adapter.base_fingerprint:016x}, "
            f"got {base.fingerprint():016x}"
        )
    for name, layer in adapter.lora_layers.items():
        if name not in base.layers:
            raise IncompatibleAdapter(f"adapter targets unknown layer {name!r}")
        if base.layers[name].shape != layer.shape:
            raise IncompatibleAdapter(
                f"{name}: adapter delta {layer.shape} vs base {base.layers[name].shape}"
            )
    if adapter.embedding.layers != base.config.blocks:
        raise IncompatibleAdapter(
            f"embedding has {adapter.embedding.layers} layers, model has {base.config.blocks} blocks"
        )


def apply_adapter(base: ModelWeights, adapter: ConceptAdapter) -> ModelWeights:
    """Copy of ``base`` with the adapter's deltas merged in and its concept registered."""
    check_compatible(base, adapter)
    updated = {name: base.layers[name] + merge_delta(layer) for name, layer in adapter.lora_layers.items()}
    out = base.with_layers(updated)
    out.concepts[adapter.concept_name] = adapter.embedding
    return out


def init_decomposed_embedding(class_vector, layers: int, rng_seed, rand_scale: float = 0.02,
                              concept_name: str = "<concept>") -> DecomposedEmbedding:
    if rand_scale <= 0:
        raise ValueError("rand_scale must be > 0")
    cv = np.asarray(class_vector, dtype=np.float64)
    rng = np.random.default_rng(rng_seed)
    v_rand = rng.normal(0.0, rand_scale, size=(layers, cv.shape[0]))
    v_class = np.tile(cv, (layers, 1))
    return DecomposedEmbedding(concept_name, v_rand, v_class)


def _concept_map(concepts) -> Mapping[str, DecomposedEmbedding]:
    if isinstance(concepts, Mapping):
        return concepts
    return {c.concept_name: c for c in (concepts or ())}


def tokenize(prompt: str | Sequence[str]) -> list[str]:
    if isinstance(prompt, str):
        return prompt.split()
    return list(prompt)


def resolve_prompt(tokens, base_table: Mapping[str, np.ndarray],
                   concepts: Iterable[DecomposedEmbedding] | Mapping[str, DecomposedEmbedding],
                   layer: int) -> np.ndarray:
    """Token rows for one layer; each concept token expands to ``(v_rand, v_class)``.

    ``base_table`` may also be a merged table whose concept entries are
    :class:`DecomposedEmbedding` values.
    """
    cmap = _concept_map(concepts)
    rows = []
    for tok in tokenize(tokens):
        entry = cmap.get(tok, base_table.get(tok))
        if isinstance(entry, DecomposedEmbedding):
            rows.extend(entry.tokens_at(layer))
        elif entry is not None:
            rows.append(np.asarray(entry, dtype=np.float64))
        else:
            raise UnknownToken(tok)
    if not rows:
        raise ValueError("empty prompt")
    return np.stack(rows)


def build_prompt(tokens, weights: ModelWeights, extra_concepts=()) -> PromptEmbedding:
    """Layer-wise prompt embedding against the model's own token table."""
    cmap = dict(weights.concepts)
    cmap.update(_concept_map(extra_concepts))
    return [resolve_prompt(tokens, weights.vocab, cmap, layer) for layer in range(weights.config.blocks)]
