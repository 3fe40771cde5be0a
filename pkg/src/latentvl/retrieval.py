"""Vision-text similarity under single-, multi- and mixed-stream topologies.

single: joint encode of each (vision, text) pair, VTM decode -> score.
multi:  per-modality encodings pooled with a CLS query; temperature-scaled
        cosine between the pooled vectors.
mixed:  per-modality encodings; a light decoder pass over their
        concatenation (2N keys) produces the score.

multi and mixed can cache per-item visual latents; cached and fresh scores
are bit-identical.  Cache entries are only valid under a matching
config+weights fingerprint.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import CorpusItem
from .embedding import VisionInput
from .errors import ContractError, ParameterError
from .model import VisionLanguageModel
from .tensor import Tensor, no_grad

STREAM_MODES = ("single", "multi", "mixed")


def model_fingerprint(model: VisionLanguageModel) -> str:
    """Hash of the architecture config and current weights."""
    h = hashlib.sha256()
    h.update(json.dumps(model.cfg.to_dict(), sort_keys=True).encode())
    h.update(model.params.state_hash().encode())
    return h.hexdigest()[:16]


class LatentCache:
    """item id -> visual latent encoding, valid for one model fingerprint."""

    def __init__(self, fingerprint: str):
        self.fingerprint = fingerprint
        self._entries: dict[int, np.ndarray] = {}
        self.misses = 0

    def put(self, item_id: int, z_v: np.ndarray) -> None:
        self._entries[int(item_id)] = np.asarray(z_v)

    def get(self, item_id: int, fingerprint: str) -> np.ndarray | None:
        if fingerprint != self.fingerprint:
            return None
        return self._entries.get(int(item_id))

    def __len__(self) -> int:
        return len(self._entries)

    def save(self, path: str) -> None:
        save_checkpoint(path, {f"item:{i}": z for i, z in self._entries.items()},
                        header={"kind": "latent_cache",
                                "fingerprint": self.fingerprint})

    @classmethod
    def load(cls, path: str) -> "LatentCache":
        header, tensors = load_checkpoint(path)
        if header.get("kind") != "latent_cache":
            raise ContractError(f"{path} is not a latent cache")
        cache = cls(header["fingerprint"])
        for name, arr in tensors.items():
            cache.put(int(name.split(":", 1)[1]), arr)
        return cache


def item_vision(item: CorpusItem) -> VisionInput:
    return VisionInput(frames=item.frames, is_video=item.is_video)


def encode_visual_latent(model, vision: VisionInput, layer_mask=None) -> np.ndarray:
    with no_grad():
        return model.encode_modality(vision=vision, layer_mask=layer_mask).z_e.data


def encode_text_latent(model, text, layer_mask=None) -> np.ndarray:
    with no_grad():
        return model.encode_modality(text=text, layer_mask=layer_mask).z_e.data


def visual_latent(model, cache: LatentCache | None, item: CorpusItem,
                  fingerprint: str, layer_mask=None) -> np.ndarray:
    """Cached lookup; recompute (and fill) on miss or stale fingerprint."""
    if cache is not None:
        hit = cache.get(item.item_id, fingerprint)
        if hit is not None:
            return hit
        cache.misses += 1
    z = encode_visual_latent(model, item_vision(item), layer_mask)
    if cache is not None and cache.fingerprint == fingerprint:
        cache.put(item.item_id, z)
    return z


def pool_latent(model, z_e: np.ndarray) -> np.ndarray:
    """d-vector summary of a latent encoding via the retrieval CLS query."""
    with no_grad():
        q = model.decoder.build_ret_query()
        return model.decoder.decode(Tensor(z_e), q).data[0]


def _vtm_score(model, z_keys: np.ndarray) -> float:
    q = model.decoder.build_vtm_query()
    decoded = model.decoder.decode(Tensor(z_keys), q)
    logits = model.decoder.head_logits(decoded, q, "VTM").data[0]
    return float(logits[1] - logits[0])


def score_single_stream(model, vision: VisionInput, text, layer_mask=None) -> float:
    """Joint encode + VTM decode; score = logit(match) - logit(non-match)."""
    with no_grad():
        enc = model.encode(vision, text, layer_mask)
        return _vtm_score(model, enc.z_e.data)


def score_mixed_stream(model, z_v: np.ndarray, z_t: np.ndarray) -> float:
    """VTM decode over the 2N-row concatenation of the two latents."""
    with no_grad():
        return _vtm_score(model, np.concatenate([z_v, z_t], axis=0))


def score_multi_stream(model, pooled_v: np.ndarray, pooled_t: np.ndarray,
                       tau: float = 0.07) -> float:
    """Temperature-scaled cosine of the pooled vectors (counts d MACs)."""
    with no_grad():
        v = T.l2_normalize_rows(Tensor(pooled_v[None, :]))
        t = T.l2_normalize_rows(Tensor(pooled_t[None, :]))
        dot = T.matmul(v, T.transpose_last2(t))
        return float(dot.data[0, 0]) / tau


def similarity_matrix(model, items: list[CorpusItem],
                      queries: list[CorpusItem] | None = None,
                      mode: str = "mixed", cache: LatentCache | None = None,
                      tau: float = 0.07, layer_mask=None) -> np.ndarray:
    """Text-query x visual-item score matrix s^VL.

    Queries default to the items themselves (each caption retrieves its own
    visual).  single-stream forbids caching.
    """
    if mode not in STREAM_MODES:
        raise ParameterError(f"unknown stream mode {mode!r}")
    if mode == "single" and cache is not None:
        raise ContractError("single-stream cannot use a latent cache")
    queries = queries if queries is not None else items
    fp = model_fingerprint(model)
    sim = np.zeros((len(queries), len(items)))

    if mode == "single":
        for qi, q in enumerate(queries):
            text = model.text_input(q.caption)
            for ci, it in enumerate(items):
                sim[qi, ci] = score_single_stream(model, item_vision(it), text,
                                                  layer_mask)
        return sim

    z_vs = [visual_latent(model, cache, it, fp, layer_mask) for it in items]
    if mode == "multi":
        pooled_vs = [pool_latent(model, z) for z in z_vs]
    for qi, q in enumerate(queries):
        z_t = encode_text_latent(model, model.text_input(q.caption), layer_mask)
        if mode == "mixed":
            for ci, z_v in enumerate(z_vs):
                sim[qi, ci] = score_mixed_stream(model, z_v, z_t)
        else:
            pooled_t = pool_latent(model, z_t)
            for ci, pv in enumerate(pooled_vs):
                sim[qi, ci] = score_multi_stream(model, pv, pooled_t, tau)
    return sim


def measure_query_macs(model, items: list[CorpusItem], query: CorpusItem,
                       mode: str, tau: float = 0.07,
                       layer_mask=None) -> tuple[int, int]:
    """Instrumented (MACs, wall ns) for scoring one text query over a corpus.

    multi/mixed assume a warm cache: corpus latents (and pooled vectors for
    multi) are prepared outside the measured region, matching the
    retrieval_query_macs cost formulas.
    """
    import time  # noqa: PLC0415

    if mode not in STREAM_MODES:
        raise ParameterError(f"unknown stream mode {mode!r}")
    z_vs = pooled_vs = None
    if mode != "single":
        z_vs = [encode_visual_latent(model, item_vision(it), layer_mask)
                for it in items]
        if mode == "multi":
            pooled_vs = [pool_latent(model, z) for z in z_vs]
    text = model.text_input(query.caption)
    with T.Tape() as tape:
        t0 = time.perf_counter_ns()
        if mode == "single":
            for it in items:
                score_single_stream(model, item_vision(it), text, layer_mask)
        elif mode == "mixed":
            z_t = encode_text_latent(model, text, layer_mask)
            for z_v in z_vs:
                score_mixed_stream(model, z_v, z_t)
        else:
            z_t = encode_text_latent(model, text, layer_mask)
            pooled_t = pool_latent(model, z_t)
            for pv in pooled_vs:
                score_multi_stream(model, pv, pooled_t, tau)
        wall_ns = time.perf_counter_ns() - t0
    return tape.macs, wall_ns


def rank(sim: np.ndarray) -> np.ndarray:
    """Per-query item ordering: descending score, ties by ascending item index."""
    if not np.all(np.isfinite(sim)):
        raise ContractError("similarity matrix has non-finite scores")
    n_items = sim.shape[1]
    idx = np.arange(n_items)
    out = np.empty_like(sim, dtype=np.int64)
    for qi in range(sim.shape[0]):
        out[qi] = np.lexsort((idx, -sim[qi]))
    return out


def recall_at_k(rankings: np.ndarray, gold: np.ndarray, k: int) -> float:
    """Fraction of queries whose gold item index appears in the top k."""
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    gold = np.asarray(gold)
    hits = sum(1 for qi in range(rankings.shape[0])
               if gold[qi] in rankings[qi, :k])
    return hits / max(1, rankings.shape[0])
