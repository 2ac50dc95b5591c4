"""A tiny synthetic image world for pretraining the base denoiser.

Images are 8x8 single-channel grids holding one shape (square, ring, bar or
stripes) in one quadrant, at one of three brightness levels. A caption names
the shape, the quadrant and optionally a brightness word, and so determines
the image completely; the base model learns to follow every word.

Part of pretraining uses two-object scenes in which each object's caption
reaches only its own quadrant through region-aware cross-attention. This
teaches the toy model the spatial locality of cross-attention that large
text-to-image models show, which regional sampling relies on. Concept
datasets for tuning are drawn from, or deliberately outside, this family.
"""

from __future__ import annotations

import numpy as np
import torch

from .toy_diffusion import (
    ModelConfig,
    ModelWeights,
    NoiseSchedule,
    default_cross_attention,
    diffusion_loss_t,
    draw_training_noise,
    init_weights,
)
from .region import make_region_cross_attention

SHAPES = ("square", "ring", "bar", "stripes")
BRIGHTNESS = {"bright": 1.5, "dim": 0.7}
VERTICAL = ("top", "bottom")
HORIZONTAL = ("left", "right")
FILLER = ("a", "photo", "of", "with", "and", "in", "scene", "picture", "the")
VOCAB = FILLER + SHAPES + tuple(BRIGHTNESS) + VERTICAL + HORIZONTAL

BACKGROUND = -0.5
DEFAULT_BRIGHTNESS = 1.0


def render(shape: str, brightness: float, row: int, col: int, size: int = 8) -> np.ndarray:
    """Draw one shape with its top-left corner at (row, col)."""
    img = np.full((size, size), BACKGROUND)
    if shape == "square":
        img[row:row + 3, col:col + 3] = brightness
    elif shape == "ring":
        img[row:row + 4, col:col + 4] = brightness
        img[row + 1:row + 3, col + 1:col + 3] = BACKGROUND
    elif shape == "bar":
        img[row:row + 4, col:col + 2] = brightness
    elif shape == "stripes":
        img[row:row + 4:2, col:col + 4] = brightness
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return img[:, :, None]


def scene_for(shape: str, brightness_word: str | None, vertical: str, horizontal: str, size: int = 8):
    """Caption tokens and image for one point of the family."""
    tokens = ["a", "photo", "of"]
    if brightness_word is not None:
        tokens.append(brightness_word)
    tokens += [shape, "in", "the", vertical, horizontal]
    half = size // 2
    level = BRIGHTNESS.get(brightness_word, DEFAULT_BRIGHTNESS)
    img = render(shape, level, VERTICAL.index(vertical) * half, HORIZONTAL.index(horizontal) * half, size)
    return tokens, img


def sample_scene(rng: np.random.Generator, size: int = 8):
    """One random (caption tokens, image) pair; the caption determines the image."""
    shape = SHAPES[rng.integers(len(SHAPES))]
    words = [None, *BRIGHTNESS]
    word = words[rng.integers(len(words))]
    return scene_for(shape, word, VERTICAL[rng.integers(2)], HORIZONTAL[rng.integers(2)], size)


def quadrant_mask(vertical: str, horizontal: str, size: int = 8) -> np.ndarray:
    half = size // 2
    mask = np.zeros((size, size), dtype=bool)
    r, c = VERTICAL.index(vertical) * half, HORIZONTAL.index(horizontal) * half
    mask[r:r + half, c:c + half] = True
    return mask


def two_object_scene(rng: np.random.Generator, places, size: int = 8):
    """Two objects at the given (vertical, horizontal) places.

    Returns the global caption, one caption per object and the composite image.
    """
    words = [None, *BRIGHTNESS]
    captions = []
    img = np.full((size, size, 1), BACKGROUND)
    for v, h in places:
        tokens, obj = scene_for(SHAPES[rng.integers(len(SHAPES))], words[rng.integers(len(words))], v, h, size)
        captions.append(tokens)
        img = np.where(obj != BACKGROUND, obj, img)
    glob = captions[0] + ["and"] + captions[1][3:]
    return glob, captions, img


def _embed(vocab, order, captions):
    width = max(len(t) for t in captions)
    ids = [[order.index(tok) for tok in t + ["the"] * (width - len(t))] for t in captions]
    table = torch.stack([vocab[k] for k in order])
    return table[torch.as_tensor(ids)]


def pretrain_base(cfg: ModelConfig = ModelConfig(), steps: int = 3000, batch: int = 32, lr: float = 3e-3,
                  seed: int = 0, log_every: int = 0, region_fraction: float = 0.5,
                  region_start: float = 0.5) -> ModelWeights:
    """Train every weight and token vector of a fresh model on the shape family.

    After the first ``region_start`` share of the steps, a ``region_fraction``
    share of steps use two-object scenes with quadrant-masked regional
    captions; all other steps use single-object scenes. Mixing regional
    scenes in from the start keeps the model from learning to place shapes
    from the caption alone.
    """
    weights = init_weights(cfg, seed, VOCAB)
    schedule = NoiseSchedule.for_config(cfg)
    rng = np.random.default_rng(seed + 1)
    params = {k: torch.tensor(v, requires_grad=True) for k, v in weights.layers.items()}
    vocab = {k: torch.tensor(v, requires_grad=True) for k, v in weights.vocab.items()}
    opt = torch.optim.Adam(list(params.values()) + list(vocab.values()), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(steps, 1))
    order = list(vocab)
    quadrants = [(v, h) for v in VERTICAL for h in HORIZONTAL]
    for step in range(steps):
        if step >= region_start * steps and rng.random() < region_fraction:
            pick = rng.choice(len(quadrants), size=2, replace=False)
            places = [quadrants[i] for i in pick]
            scenes = [two_object_scene(rng, places, cfg.height) for _ in range(batch)]
            emb = _embed(vocab, order, [g for g, _, _ in scenes])
            regional = [
                (torch.as_tensor(quadrant_mask(*place, cfg.height).ravel()),
                 [_embed(vocab, order, [c[i] for _, c, _ in scenes])] * cfg.blocks)
                for i, place in enumerate(places)
            ]
            attend = make_region_cross_attention(regional)
            z0 = torch.as_tensor(np.stack([img for _, _, img in scenes]))
        else:
            scenes = [sample_scene(rng, cfg.height) for _ in range(batch)]
            emb = _embed(vocab, order, [t for t, _ in scenes])
            attend = default_cross_attention
            z0 = torch.as_tensor(np.stack([img for _, img in scenes]))
        t, eps = draw_training_noise(rng, batch, cfg, schedule)
        loss = diffusion_loss_t(params, cfg, schedule, z0, [emb] * cfg.blocks, t, eps, attend)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if log_every and step % log_every == 0:
            print(f"pretrain step {step}: loss {loss.item():.4f}")
    return ModelWeights(
        {k: v.detach().numpy().copy() for k, v in params.items()},
        cfg,
        {k: v.detach().numpy().copy() for k, v in vocab.items()},
    )
