"""Full model: embedding tables + latent encoder + query decoder + heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .decoder import QueryDecoder, QuerySpec, concat_queries
from .embedding import (ByteTokenizer, EmbedConfig, EmbeddingTables, InputArray,
                        TextInput, VisionInput, build_input_array)
from .encoder import EncodedLatent, EncoderConfig, LatentEncoder
from .errors import ContractError
from .rng import RngStream
from .tensor import ParamStore, Tensor


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    n_answers: int = 11

    def __post_init__(self):
        if self.encoder.d != self.embed.d:
            raise ContractError(
                f"encoder d={self.encoder.d} != embedding d={self.embed.d}")

    def to_dict(self) -> dict:
        return {"encoder": asdict(self.encoder), "embed": asdict(self.embed),
                "n_answers": self.n_answers}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(encoder=EncoderConfig(**d["encoder"]),
                   embed=EmbedConfig(**d["embed"]),
                   n_answers=d["n_answers"])


class VisionLanguageModel:
    """Owns the ParamStore and wires the submodules together."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        self.tokenizer = ByteTokenizer()
        self.params = ParamStore()
        rng = RngStream(seed).child("init")
        self.tables = EmbeddingTables(self.params, cfg.embed, rng.child("embed"),
                                      dtype)
        self.encoder = LatentEncoder(self.params, cfg.encoder, rng.child("enc"),
                                     dtype)
        self.decoder = QueryDecoder(self.params, cfg.encoder.d, cfg.encoder.heads,
                                    cfg.encoder.mlp_ratio, cfg.embed.vocab_size,
                                    cfg.n_answers, self.tables.token_pos_emb,
                                    rng.child("dec"), dtype)

    # -- input construction ---------------------------------------------

    def input_array(self, vision: VisionInput | None = None,
                    text: TextInput | None = None) -> InputArray:
        return build_input_array(self.tables, vision, text)

    def text_input(self, caption: str) -> TextInput:
        ids, mask = self.tokenizer.encode(caption, self.cfg.embed.max_text_len)
        return TextInput(token_ids=ids, attention_mask=mask)

    # -- encoding ---------------------------------------------------------

    def encode(self, vision: VisionInput | None = None,
               text: TextInput | None = None,
               layer_mask: list[bool] | None = None) -> EncodedLatent:
        """Encode one (possibly single-modality) example."""
        if self.cfg.encoder.aggregation == "joint":
            inputs = self.input_array(vision, text)
        else:
            if vision is None or text is None:
                raise ContractError("separate aggregation needs both modalities")
            inputs = [self.input_array(vision=vision),
                      self.input_array(text=text)]
        return self.encoder.encode(inputs, layer_mask)

    def encode_modality(self, vision: VisionInput | None = None,
                        text: TextInput | None = None,
                        layer_mask: list[bool] | None = None) -> EncodedLatent:
        """Single-modality encoding for multi/mixed-stream retrieval."""
        if (vision is None) == (text is None):
            raise ContractError("encode_modality takes exactly one modality")
        inputs = self.input_array(vision, text)
        return self.encoder.encode(inputs, layer_mask)

    # -- decoding ---------------------------------------------------------

    def pretrain_forward(self, vision: VisionInput, masked_text: TextInput,
                         mask_flags, layer_mask=None):
        """VTM + MLM forward: returns (vtm_logits (1,2), mlm_logits (L_T,|V|))."""
        enc = self.encode(vision, masked_text, layer_mask)
        q = concat_queries(self.decoder.build_vtm_query(),
                           self.decoder.build_mlm_query(mask_flags))
        decoded = self.decoder.decode(enc.z_e, q)
        vtm_logits = self.decoder.head_logits(decoded, q, "VTM")
        mlm_logits = self.decoder.head_logits(decoded, q, "MLM")
        return vtm_logits, mlm_logits

    def qa_forward(self, vision: VisionInput, text: TextInput,
                   layer_mask=None) -> Tensor:
        enc = self.encode(vision, text, layer_mask)
        q = self.decoder.build_qa_query()
        decoded = self.decoder.decode(enc.z_e, q)
        return self.decoder.head_logits(decoded, q, "QA")


def save_model(path: str, model: VisionLanguageModel, seed: int = 0,
               step: int = 0, extra: dict | None = None) -> None:
    from .checkpoint import save_checkpoint  # noqa: PLC0415

    header = {"kind": "model", "config": model.cfg.to_dict(),
              "vocab": {"size": model.cfg.embed.vocab_size,
                        "pad": ByteTokenizer.PAD, "mask": ByteTokenizer.MASK,
                        "cls": ByteTokenizer.CLS, "unk": ByteTokenizer.UNK},
              "seed": seed, "step": step}
    if extra:
        header.update(extra)
    save_checkpoint(path, model.params, header)


def load_model(path: str, dtype=np.float32) -> tuple[VisionLanguageModel, dict]:
    from .checkpoint import load_checkpoint, load_into_store  # noqa: PLC0415
    from .errors import CheckpointError  # noqa: PLC0415

    header, tensors = load_checkpoint(path)
    if header.get("kind") != "model":
        raise CheckpointError(f"{path} is not a model checkpoint")
    model = VisionLanguageModel(ModelConfig.from_dict(header["config"]),
                                seed=header.get("seed", 0), dtype=dtype)
    load_into_store(model.params, tensors)
    return model, header
