"""Run configuration: every knob in one strict-keyed structure.

Configs are JSON files; unknown keys are rejected so typos fail loudly.
Defaults are the desk-scale toy setup.  The reference architecture values
(d=768, heads=12, k=3, N=128, p_ld=0.5) are available via
`reference_encoder_config()` for cost-model work.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .data import ANSWER_VOCAB
from .embedding import EmbedConfig
from .encoder import EncoderConfig
from .errors import ParameterError
from .model import ModelConfig


@dataclass
class RunConfig:
    seed: int = 0
    # architecture
    d: int = 64
    heads: int = 4
    k: int = 3
    l: int = 4
    n_latents: int = 16
    p_ld: float = 0.5
    aggregation: str = "joint"
    latent_pos: str = "learned"
    # embedding / data shapes
    image_size: int = 64
    patch: int = 8
    max_frames: int = 4
    max_text_len: int = 40
    # training
    lr: float = 3e-4
    weight_decay: float = 0.001
    steps: int = 2000
    batch_size: int = 8
    warm_steps: int = 0            # > 0 enables the two-stage freeze schedule
    layerdrop: bool = True
    grad_clip: float = 1.0
    # retrieval
    stream: str = "mixed"
    tau: float = 0.07
    # data generation
    corpus_index: str = "corpus.jsonl"
    train_count: int = 64
    val_count: int = 16
    test_count: int = 16
    video_fraction: float = 0.25

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        with open(path) as f:
            raw = json.load(f)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(dataclasses.asdict(self), f, indent=2, sort_keys=True)
            f.write("\n")

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(d=self.d, heads=self.heads, k=self.k, l=self.l,
                             n_latents=self.n_latents, p_ld=self.p_ld,
                             aggregation=self.aggregation,
                             latent_pos=self.latent_pos)

    def embed_config(self) -> EmbedConfig:
        lp = (self.image_size // self.patch) ** 2
        return EmbedConfig(d=self.d, patch=self.patch,
                           max_frames=self.max_frames, max_patches=lp,
                           max_text_len=self.max_text_len)

    def model_config(self) -> ModelConfig:
        return ModelConfig(encoder=self.encoder_config(),
                           embed=self.embed_config(),
                           n_answers=len(ANSWER_VOCAB))


def reference_encoder_config(n_latents: int = 128) -> EncoderConfig:
    """The full-scale architecture used for paper-shape cost arithmetic."""
    return EncoderConfig(d=768, heads=12, k=3, l=4, n_latents=n_latents,
                         p_ld=0.5)
