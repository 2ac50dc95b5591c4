import pytest

from conceptfuse.adapter import ConceptAdapter, apply_adapter
from conceptfuse.demo import demo_datasets
from conceptfuse.errors import UnknownToken
from conceptfuse.evaluation import ConceptAlignment, EvalReport, cosine, eval_identity
from conceptfuse.fusion import weight_fuse
from conceptfuse.tuning import TuningConfig, tune_concept

from conftest import random_adapter


@pytest.fixture(scope="module")
def trained(base):
    return tune_concept(base, demo_datasets()[0], TuningConfig(steps=200))


def test_cosine_basics():
    assert cosine([1.0, 0.0], [2.0, 0.0]) == 1.0
    assert cosine([1.0, 0.0], [0.0, 3.0]) == 0.0
    assert cosine([1.0, 2.0], [-1.0, -2.0]) == pytest.approx(-1.0)
    assert cosine([0.0, 0.0], [1.0, 1.0]) == 0.0


def test_self_comparison_is_one(base, trained):
    single = apply_adapter(base, trained)
    report = eval_identity(base, single, [trained], [["a photo of <cat>"]], seeds=[1, 2], steps=10)
    row = report.per_concept["<cat>"]
    assert row.alignment_single == pytest.approx(1.0, abs=1e-12)
    assert row.alignment_fused == pytest.approx(1.0, abs=1e-12)
    assert row.change == pytest.approx(0.0, abs=1e-12)


def test_absent_adapter_aligns_worse(base, trained):
    single = apply_adapter(base, trained)
    prompts = {"<cat>": ["a photo of <cat>", "a picture of <cat> in the top left"]}
    self_report = eval_identity(base, single, [trained], prompts, seeds=[1, 2, 3], steps=10)
    # the base with only the token (no LoRA) stands in for a model missing the adapter
    token_only = ConceptAdapter({}, trained.embedding, trained.base_fingerprint, {})
    absent = apply_adapter(base, token_only)
    report = eval_identity(base, absent, [trained], prompts, seeds=[1, 2, 3], steps=10)
    assert report.per_concept["<cat>"].alignment_fused < self_report.per_concept["<cat>"].alignment_fused


def test_change_is_exact_difference_and_mean_is_arithmetic(base):
    a, b = random_adapter(base, "<a>", seed=1), random_adapter(base, "<b>", seed=2)
    fused = weight_fuse(base, [a, b])
    report = eval_identity(base, fused, [a, b], {"<a>": ["a photo of <a>"], "<b>": ["a photo of <b>"]},
                           seeds=[4], steps=5)
    for row in report.per_concept.values():
        assert row.change == row.alignment_fused - row.alignment_single
    changes = [r.change for r in report.per_concept.values()]
    assert report.mean_change == pytest.approx(sum(changes) / 2, abs=1e-15)


def test_mean_change_of_empty_report():
    assert EvalReport().mean_change == 0.0
    r = EvalReport({"x": ConceptAlignment(1.0, 0.5, -0.5), "y": ConceptAlignment(1.0, 0.9, -0.1)})
    assert r.mean_change == pytest.approx(-0.3)


def test_unresolvable_concept(base):
    a = random_adapter(base, "<a>")
    with pytest.raises(UnknownToken):
        eval_identity(base, base, [a], [["a photo of <a>"]], seeds=[1], steps=2)
