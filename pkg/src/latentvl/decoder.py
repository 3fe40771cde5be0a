"""Structured decoding: one cross-attention from a task query array over z_e.

Query rows never attend to each other, so decoding a concatenated multi-task
query and slicing out one task's segment is bit-identical to decoding that
task's query alone.  The MLM query is built from positions and mask flags
only; token identities reach the model exclusively through the encoder input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import AttentionLayer, Linear
from .errors import ContractError
from .rng import RngStream
from .tensor import ParamStore, Tensor

TASK_VTM = "VTM"
TASK_MLM = "MLM"
TASK_QA = "QA"
TASK_RET_CLS = "RET-CLS"


@dataclass
class QuerySpec:
    rows: Tensor
    segments: list[tuple[str, int, int]]  # (task tag, start, stop)

    @property
    def length(self) -> int:
        return self.rows.data.shape[0]

    def segment(self, tag: str) -> tuple[int, int]:
        for t, a, b in self.segments:
            if t == tag:
                return a, b
        raise ContractError(f"no {tag} segment in query")


class QueryDecoder:
    """Decoder cross-attention layer, query embeddings, and task heads."""

    def __init__(self, store: ParamStore, d: int, heads: int, mlp_ratio: int,
                 vocab_size: int, n_answers: int, token_pos_emb: Tensor,
                 rng: RngStream, dtype=np.float32):
        self.d = d
        # shared with the encoder's text positional table (one table)
        self.token_pos_emb = token_pos_emb
        self.layer = AttentionLayer(store, "dec.cross", d, heads, mlp_ratio,
                                    rng.child("cross"), dtype)
        std = 0.02
        self.vtm_cls = store.add("dec.vtm_cls",
                                 rng.child("vtm_cls").truncated_normal(std, (1, d)),
                                 dtype=dtype)
        self.qa_cls = store.add("dec.qa_cls",
                                rng.child("qa_cls").truncated_normal(std, (1, d)),
                                dtype=dtype)
        self.ret_cls = store.add("dec.ret_cls",
                                 rng.child("ret_cls").truncated_normal(std, (1, d)),
                                 dtype=dtype)
        self.mask_emb = store.add("dec.mask_emb",
                                  rng.child("mask_emb").truncated_normal(std, (2, d)),
                                  dtype=dtype)
        self.vtm_head = Linear(store, "dec.vtm_head", d, 2, rng.child("vtm_h"), dtype)
        self.mlm_head = Linear(store, "dec.mlm_head", d, vocab_size,
                               rng.child("mlm_h"), dtype)
        self.qa_head = Linear(store, "dec.qa_head", d, n_answers,
                              rng.child("qa_h"), dtype)

    # -- query builders ------------------------------------------------

    def build_vtm_query(self) -> QuerySpec:
        return QuerySpec(rows=T.slice_rows(self.vtm_cls, 0, 1),
                         segments=[(TASK_VTM, 0, 1)])

    def build_qa_query(self) -> QuerySpec:
        return QuerySpec(rows=T.slice_rows(self.qa_cls, 0, 1),
                         segments=[(TASK_QA, 0, 1)])

    def build_ret_query(self) -> QuerySpec:
        return QuerySpec(rows=T.slice_rows(self.ret_cls, 0, 1),
                         segments=[(TASK_RET_CLS, 0, 1)])

    def build_mlm_query(self, mask_flags) -> QuerySpec:
        """row i = token_pos[i] + mask_emb[flag_i]; token ids never enter."""
        flags = np.asarray(mask_flags, dtype=np.int64)
        lt = flags.shape[0]
        if lt < 1:
            raise ContractError("MLM query needs at least one position")
        pos = T.embedding_lookup(self.token_pos_emb, np.arange(lt))
        m = T.embedding_lookup(self.mask_emb, flags)
        return QuerySpec(rows=T.add(pos, m), segments=[(TASK_MLM, 0, lt)])

    # -- decoding ------------------------------------------------------

    def decode(self, z_e: Tensor, q: QuerySpec) -> Tensor:
        """Single cross-attention (queries q, keys/values z_e) + residual MLP."""
        return self.layer(q.rows, z_e)

    def head_logits(self, decoded: Tensor, q: QuerySpec, tag: str) -> Tensor:
        a, b = q.segment(tag)
        rows = T.slice_rows(decoded, a, b)
        if tag == TASK_VTM or tag == TASK_RET_CLS:
            return self.vtm_head(rows) if tag == TASK_VTM else rows
        if tag == TASK_MLM:
            return self.mlm_head(rows)
        if tag == TASK_QA:
            return self.qa_head(rows)
        raise ContractError(f"unknown task tag {tag!r}")


def concat_queries(*specs: QuerySpec) -> QuerySpec:
    """Stack query rows in argument order, re-offsetting segments."""
    if not specs:
        raise ContractError("concat_queries of nothing")
    if len(specs) == 1:
        return specs[0]
    rows = T.concat_rows([s.rows for s in specs])
    segments = []
    off = 0
    for s in specs:
        for tag, a, b in s.segments:
            segments.append((tag, a + off, b + off))
        off += s.length
    return QuerySpec(rows=rows, segments=segments)
