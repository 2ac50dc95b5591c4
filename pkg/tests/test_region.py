import math
import warnings

import numpy as np
import pytest

from conceptfuse.adapter import build_prompt
from conceptfuse.errors import OverlapWarning, ShapeError, UnknownToken
from conceptfuse.region import (
    AttentionContext,
    RegionSpec,
    cross_attention,
    region_aware_attention,
    sample_with_regions,
)
from conceptfuse.toy_diffusion import Trace, sample_reverse


def projections(rng, d=4, dz=6, dt=5):
    return {"q": rng.standard_normal((d, dz)), "k": rng.standard_normal((d, dt)),
            "v": rng.standard_normal((d, dt)), "out": rng.standard_normal((dz, d))}


def ctx(rng, tokens=3, dt=5, d=4):
    return AttentionContext(rng.standard_normal((tokens, dt)), head_dim=d)


def half_masks(h=2, w=4):
    left = np.zeros((h, w), int)
    left[:, : w // 2] = 1
    return left, 1 - left


# plain cross-attention -------------------------------------------------------------

def test_single_key_gives_weight_one():
    rng = np.random.default_rng(0)
    p = projections(rng)
    c = ctx(rng, tokens=1)
    z = rng.standard_normal((8, 6))
    out, w = cross_attention(z, c, p, return_weights=True)
    np.testing.assert_array_equal(w, np.ones((8, 1)))
    v_row = p["v"] @ c.keys_source[0]
    np.testing.assert_allclose(out, np.tile(p["out"] @ v_row, (8, 1)), atol=1e-12)


def test_zero_queries_give_uniform_attention():
    rng = np.random.default_rng(1)
    p = projections(rng)
    p["q"] = np.zeros_like(p["q"])
    c = ctx(rng, tokens=4)
    out, w = cross_attention(rng.standard_normal((3, 6)), c, p, return_weights=True)
    np.testing.assert_allclose(w, 0.25, atol=1e-15)
    mean_v = (p["v"] @ c.keys_source.T).mean(axis=1)
    np.testing.assert_allclose(out, np.tile(p["out"] @ mean_v, (3, 1)), atol=1e-12)


def test_two_by_two_hand_computed():
    # scalar projections: d = 1, so scores are q_i * k_j
    p = {"q": np.array([[1.0]]), "k": np.array([[2.0]]), "v": np.array([[3.0]]), "out": np.array([[1.0]])}
    c = AttentionContext(np.array([[0.0], [1.0]]), head_dim=1)
    z = np.array([[0.0], [1.0]])
    out, w = cross_attention(z, c, p, return_weights=True)
    # query 0 scores (0, 0); query 1 scores (0, 2)
    e2 = math.exp(2.0)
    expected_w = np.array([[0.5, 0.5], [1 / (1 + e2), e2 / (1 + e2)]])
    np.testing.assert_allclose(w, expected_w, atol=1e-15)
    np.testing.assert_allclose(out[:, 0], expected_w @ np.array([0.0, 3.0]), atol=1e-15)


def test_cross_attention_shape_errors():
    rng = np.random.default_rng(2)
    p = projections(rng)
    with pytest.raises(ShapeError):
        cross_attention(rng.standard_normal((3, 7)), ctx(rng), p)
    del p["out"]
    with pytest.raises(ShapeError):
        cross_attention(rng.standard_normal((3, 6)), ctx(rng), p)


# region-aware attention ---------------------------------------------------------------

def test_rows_are_stochastic_globally_and_regionally():
    rng = np.random.default_rng(3)
    p = projections(rng)
    left, right = half_masks()
    res = region_aware_attention(rng.standard_normal((8, 6)), ctx(rng),
                                 [RegionSpec(left, ctx(rng, 2)), RegionSpec(right, ctx(rng, 5))], p)
    assert len(res.attention_weights) == 3
    for w in res.attention_weights:
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)


def test_zero_regions_equals_cross_attention():
    rng = np.random.default_rng(4)
    p, c = projections(rng), ctx(rng)
    z = rng.standard_normal((8, 6))
    res = region_aware_attention(z, c, [], p)
    np.testing.assert_array_equal(res.output, cross_attention(z, c, p))
    assert res.warnings == []


def test_full_mask_with_global_prompt_equals_cross_attention():
    rng = np.random.default_rng(5)
    p, c = projections(rng), ctx(rng)
    z = rng.standard_normal((8, 6))
    res = region_aware_attention(z, c, [RegionSpec(np.ones((2, 4), int), c)], p)
    np.testing.assert_array_equal(res.output, cross_attention(z, c, p))


def test_disjoint_regions_are_local():
    rng = np.random.default_rng(6)
    p, g = projections(rng), ctx(rng)
    left, right = half_masks()
    c1, c2 = ctx(rng, 2), ctx(rng, 3)
    z = rng.standard_normal((8, 6))
    base = region_aware_attention(z, g, [RegionSpec(left, c1), RegionSpec(right, c2)], p).output
    sel = left.reshape(-1).astype(bool)

    other_prompt = region_aware_attention(z, g, [RegionSpec(left, c1), RegionSpec(right, ctx(rng, 4))], p).output
    np.testing.assert_array_equal(other_prompt[sel], base[sel])
    assert not np.array_equal(other_prompt[~sel], base[~sel])

    z2 = z.copy()
    z2[~sel] += rng.standard_normal(z2[~sel].shape)
    other_latent = region_aware_attention(z2, g, [RegionSpec(left, c1), RegionSpec(right, c2)], p).output
    np.testing.assert_array_equal(other_latent[sel], base[sel])

    other_global = region_aware_attention(z, ctx(rng), [RegionSpec(left, c1), RegionSpec(right, c2)], p).output
    np.testing.assert_array_equal(other_global, base)


def test_disjoint_regions_order_independent():
    rng = np.random.default_rng(7)
    p, g = projections(rng), ctx(rng)
    left, right = half_masks()
    r1, r2 = RegionSpec(left, ctx(rng, 2)), RegionSpec(right, ctx(rng, 3))
    z = rng.standard_normal((8, 6))
    a = region_aware_attention(z, g, [r1, r2], p).output
    b = region_aware_attention(z, g, [r2, r1], p).output
    np.testing.assert_array_equal(a, b)


def test_repeated_region_is_idempotent():
    rng = np.random.default_rng(8)
    p, g = projections(rng), ctx(rng)
    left, _ = half_masks()
    r = RegionSpec(left, ctx(rng, 2))
    z = rng.standard_normal((8, 6))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", OverlapWarning)
        twice = region_aware_attention(z, g, [r, r], p).output
    np.testing.assert_array_equal(twice, region_aware_attention(z, g, [r], p).output)


def test_overlap_warns_and_later_region_wins():
    rng = np.random.default_rng(9)
    p, g = projections(rng), ctx(rng)
    left, _ = half_masks()
    full = np.ones_like(left)
    c1, c2 = ctx(rng, 2), ctx(rng, 3)
    z = rng.standard_normal((8, 6))
    with pytest.warns(OverlapWarning):
        res = region_aware_attention(z, g, [RegionSpec(left, c1), RegionSpec(full, c2)], p)
    assert len(res.warnings) == 1 and "region 1" in res.warnings[0]
    np.testing.assert_array_equal(res.output, region_aware_attention(z, g, [RegionSpec(full, c2)], p).output)


def test_region_spec_validation():
    with pytest.raises(ValueError):
        RegionSpec(np.zeros((2, 2)), "a")
    with pytest.raises(ValueError):
        RegionSpec(np.full((2, 2), 2), "a")
    with pytest.raises(ShapeError):
        RegionSpec(np.ones(4), "a")
    rng = np.random.default_rng(0)
    with pytest.raises(ShapeError):
        region_aware_attention(rng.standard_normal((8, 6)), ctx(rng), [RegionSpec(np.ones((3, 3)), ctx(rng))],
                               projections(rng))


# region-conditioned sampling --------------------------------------------------------------

class _Counter(Trace):
    def __init__(self):
        self.calls = {}

    def attention(self, name, w):
        self.calls[name] = self.calls.get(name, 0) + 1


def test_empty_regions_match_plain_sampling(base, schedule):
    tokens = "a photo of ring in the bottom left".split()
    a = sample_with_regions(base, tokens, [], steps=10, rng_seed=4)
    np.testing.assert_array_equal(a, sample_reverse(base, build_prompt(tokens, base), schedule, 10, 4))


def test_region_sampling_is_deterministic(base):
    tl = np.zeros((8, 8), int)
    tl[:4, :4] = 1
    regions = [RegionSpec(tl, "a photo of square in the top left")]
    a = sample_with_regions(base, "a photo of ring in the bottom right".split(), regions, steps=10, rng_seed=2)
    b = sample_with_regions(base, "a photo of ring in the bottom right".split(), regions, steps=10, rng_seed=2)
    np.testing.assert_array_equal(a, b)


def test_only_cross_attention_is_regional(base):
    tl = np.zeros((8, 8), int)
    tl[:4, :4] = 1
    br = np.zeros((8, 8), int)
    br[4:, 4:] = 1
    regions = [RegionSpec(tl, "a photo of square"), RegionSpec(br, "a photo of ring")]
    counter = _Counter()
    sample_with_regions(base, "a photo of".split(), regions, steps=5, rng_seed=0, trace=counter)
    for b in range(base.config.blocks):
        assert counter.calls[f"unet.b{b}.attn1"] == 5
        assert counter.calls[f"unet.b{b}.attn2"] == 5 * 3


def test_region_sampling_propagates_unknown_token(base):
    with pytest.raises(UnknownToken):
        sample_with_regions(base, ["a"], [RegionSpec(np.ones((8, 8), int), "a photo of <nobody>")], steps=2)
    with pytest.raises(ShapeError):
        sample_with_regions(base, ["a"], [RegionSpec(np.ones((4, 4), int), "a")], steps=2)
