"""Decentralized fusion of concept adapters for a toy text-to-latent diffusion model."""

from importlib import resources

from .adapter import ConceptAdapter, DecomposedEmbedding, LoraLayer, apply_adapter, build_prompt, merge_delta
from .fusion import capture_activations, gradient_fuse_layer, gradient_fuse_model, weight_fuse
from .region import RegionSpec, sample_with_regions
from .toy_diffusion import ModelConfig, ModelWeights, NoiseSchedule, sample_reverse
from .tuning import ConceptDataset, TuningConfig, tune_concept

__version__ = "0.1.0"


def load_base_model() -> ModelWeights:
    """The pretrained shape-world base model shipped with the package."""
    from .formats import model_from_bytes

    data = resources.files(__package__).joinpath("data/base.edlm").read_bytes()
    return model_from_bytes(data, "base.edlm")
