"""Identity-preservation harness: how much each concept's samples change
between its single-concept model and the fused model.

Alignment is the cosine similarity between latents drawn with identical
seeds from two models. A concept's ``alignment_single`` compares its
single-concept model with itself (so it is 1 up to rounding) and
``alignment_fused`` compares it with the fused model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .adapter import ConceptAdapter, apply_adapter, build_prompt
from .toy_diffusion import ModelWeights, NoiseSchedule, sample_reverse


@dataclass
class ConceptAlignment:
    alignment_single: float
    alignment_fused: float
    change: float


@dataclass
class EvalReport:
    per_concept: dict[str, ConceptAlignment] = field(default_factory=dict)
    method: str = ""

    @property
    def mean_change(self) -> float:
        if not self.per_concept:
            return 0.0
        return float(np.mean([row.change for row in self.per_concept.values()]))


def cosine(a, b) -> float:
    a = np.ravel(a)
    b = np.ravel(b)
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    return float(a @ b / denom) if denom > 0 else 0.0


def _mean_alignment(ref: ModelWeights, other: ModelWeights, prompts, seeds, schedule, steps) -> float:
    sims = []
    for prompt in prompts:
        p_ref = build_prompt(prompt, ref)
        p_other = build_prompt(prompt, other)
        for seed in seeds:
            x = sample_reverse(ref, p_ref, schedule, steps, seed)
            y = x if other is ref else sample_reverse(other, p_other, schedule, steps, seed)
            sims.append(cosine(x, y))
    return float(np.mean(sims))


def eval_identity(base: ModelWeights, fused: ModelWeights, adapters: Sequence[ConceptAdapter],
                  eval_prompts: Mapping[str, Sequence] | Sequence[Sequence], seeds: Sequence[int],
                  steps: int = 20, method: str = "") -> EvalReport:
    """Single-vs-fused alignment for every adapter's concept.

    ``eval_prompts`` maps concept name to its prompts, or is a list aligned
    with ``adapters``.
    """
    if not isinstance(eval_prompts, Mapping):
        eval_prompts = {a.concept_name: p for a, p in zip(adapters, eval_prompts)}
    schedule = NoiseSchedule.for_config(base.config)
    report = EvalReport(method=method)
    for adapter in adapters:
        single = apply_adapter(base, adapter)
        prompts = eval_prompts[adapter.concept_name]
        a_single = _mean_alignment(single, single, prompts, seeds, schedule, steps)
        a_fused = _mean_alignment(single, fused, prompts, seeds, schedule, steps)
        report.per_concept[adapter.concept_name] = ConceptAlignment(a_single, a_fused, a_fused - a_single)
    return report
