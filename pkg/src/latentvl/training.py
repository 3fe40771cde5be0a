"""Pretraining objectives (VTM + MLM), Adam, freeze schedules, train loop."""

from __future__ import annotations

import fnmatch
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import ANSWER_VOCAB, CorpusItem
from .decoder import concat_queries
from .embedding import ByteTokenizer, TextInput, VisionInput
from .encoder import sample_layerdrop_mask
from .errors import ContractError, NumericError, ParameterError
from .model import VisionLanguageModel
from .retrieval import (item_vision, pool_latent, score_mixed_stream,
                        similarity_matrix, rank, recall_at_k)
from .rng import RngStream
from .tensor import ParamStore, Tensor, no_grad


# ---------------------------------------------------------------------------
# batch construction
# ---------------------------------------------------------------------------

def make_vtm_batch(items: list[CorpusItem], batch_size: int, rng: RngStream,
                   p_negative: float = 0.5):
    """Sample (vision item, text item, is_match) triples.

    With probability p_negative the visual input is replaced by a different
    item's visual (never the original), making a non-matching pair.
    """
    if len(items) < 2:
        raise ContractError("VTM negatives need a corpus of >= 2 items")
    batch = []
    for b in range(batch_size):
        ti = int(rng.integers(len(items)))
        text_item = items[ti]
        if rng.random() < p_negative:
            vi = int(rng.integers(len(items) - 1))
            if vi >= ti:
                vi += 1
            batch.append((items[vi], text_item, 0))
        else:
            batch.append((text_item, text_item, 1))
    return batch


def mask_tokens(text: TextInput, rng: RngStream, p_mask: float = 0.15,
                p_replace_mask: float = 0.8, p_replace_random: float = 0.1):
    """BERT-style corruption over non-pad positions.

    Returns (masked_ids, flags, targets): flags mark selected positions,
    targets hold the original ids there (-1 elsewhere).  Of the selected,
    80% become MASK, 10% a random byte, 10% stay unchanged.
    """
    ids = text.token_ids.copy()
    flags = np.zeros_like(ids, dtype=bool)
    targets = np.full_like(ids, -1)
    candidates = np.flatnonzero(text.attention_mask)
    if candidates.size == 0:
        raise ContractError("mask_tokens needs at least one non-pad token")
    selected = candidates[rng.random(candidates.size) < p_mask]
    for pos in selected:
        flags[pos] = True
        targets[pos] = ids[pos]
        r = rng.random()
        if r < p_replace_mask:
            ids[pos] = ByteTokenizer.MASK
        elif r < p_replace_mask + p_replace_random:
            ids[pos] = int(rng.integers(256))
        # else: keep the original token
    return ids, flags, targets


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def loss_vtm(logits: Tensor, labels) -> Tensor:
    return T.cross_entropy_rows(logits, np.atleast_1d(labels))


def loss_mlm(logits: Tensor, targets, flags) -> Tensor:
    """Cross-entropy over flagged positions only; 0 if nothing is flagged."""
    flags = np.asarray(flags, dtype=bool)
    if not flags.any():
        return Tensor(np.asarray(0.0, dtype=logits.data.dtype))
    idx = np.flatnonzero(flags)
    return T.cross_entropy_rows(T.select_rows(logits, idx),
                                np.asarray(targets)[idx])


def loss_contrastive(sim: Tensor) -> Tensor:
    """Symmetric InfoNCE over an in-batch similarity matrix (diag = positives)."""
    b = sim.data.shape[0]
    if sim.data.shape != (b, b):
        raise ContractError(f"contrastive loss needs a square matrix, got {sim.shape}")
    labels = np.arange(b)
    fwd = T.cross_entropy_rows(sim, labels)
    bwd = T.cross_entropy_rows(T.transpose_last2(sim), labels)
    return T.scale(T.add(fwd, bwd), 0.5)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def _decays(name: str) -> bool:
    return not (name.endswith(".b") or name.endswith("bias")
                or name.endswith(".gamma") or name.endswith(".beta"))


class Adam:
    """Adam with bias correction and decoupled weight decay.

    Decay skips biases and layernorm affines; frozen parameters are never
    touched.  A NaN gradient aborts with diagnostics.
    """

    def __init__(self, store: ParamStore, lr: float = 1e-3,
                 weight_decay: float = 0.001, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {n: np.zeros_like(t.data) for n, t in store.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in store.items()}

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.store.items():
            if self.store.is_frozen(name) or p.grad is None:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise NumericError(f"NaN/Inf gradient in {name!r} at step {t}")
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            upd = self.lr * mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay and _decays(name):
                upd = upd + self.lr * self.weight_decay * p.data
            p.data = (p.data - upd).astype(p.data.dtype)


def clip_grad_norm(store: ParamStore, max_norm: float = 1.0) -> float:
    total = 0.0
    for name, p in store.items():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for _, p in store.items():
            if p.grad is not None:
                p.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# freeze schedules
# ---------------------------------------------------------------------------

@dataclass
class Stage:
    steps: int
    frozen_patterns: list[str] = field(default_factory=list)
    except_patterns: list[str] = field(default_factory=list)

    def is_frozen(self, name: str) -> bool:
        hit = any(fnmatch.fnmatch(name, p) for p in self.frozen_patterns)
        keep = any(fnmatch.fnmatch(name, p) for p in self.except_patterns)
        return hit and not keep


@dataclass
class Schedule:
    stages: list[Stage]

    def stage_at(self, step: int) -> Stage:
        acc = 0
        for st in self.stages:
            acc += st.steps
            if step < acc:
                return st
        return self.stages[-1]

    def total_steps(self) -> int:
        return sum(s.steps for s in self.stages)

    def apply(self, store: ParamStore, step: int) -> None:
        st = self.stage_at(step)
        store.unfreeze_all()
        for name in store.names():
            if st.is_frozen(name):
                store.freeze(name)


def two_stage_schedule(warm_steps: int, total_steps: int) -> Schedule:
    """Stage 1 trains only the cross-attention layers; stage 2 trains all."""
    if warm_steps >= total_steps:
        raise ParameterError("warm_steps must be smaller than total_steps")
    return Schedule([
        Stage(warm_steps, frozen_patterns=["*"], except_patterns=["*cross*"]),
        Stage(total_steps - warm_steps),
    ])


def constant_schedule(total_steps: int) -> Schedule:
    return Schedule([Stage(total_steps)])


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def _forward_pretrain_item(model, vision_item, text_item, label, rng, layer_mask):
    text = model.text_input(text_item.caption)
    masked_ids, flags, targets = mask_tokens(text, rng)
    masked_text = TextInput(token_ids=masked_ids,
                            attention_mask=text.attention_mask)
    vtm_logits, mlm_logits = model.pretrain_forward(
        item_vision(vision_item), masked_text, flags, layer_mask)
    lv = loss_vtm(vtm_logits, [label])
    lm = loss_mlm(mlm_logits, targets, flags)
    vtm_ok = int(np.argmax(vtm_logits.data[0]) == label)
    if flags.any():
        pred = mlm_logits.data[flags].argmax(axis=-1)
        mlm_hits, mlm_total = int((pred == targets[flags]).sum()), int(flags.sum())
    else:
        mlm_hits, mlm_total = 0, 0
    return lv, lm, vtm_ok, mlm_hits, mlm_total


def train_loop(model: VisionLanguageModel, items: list[CorpusItem], steps: int,
               rng: RngStream, lr: float = 3e-4, weight_decay: float = 0.001,
               batch_size: int = 8, schedule: Schedule | None = None,
               layerdrop: bool = True, log_path: str | None = None,
               grad_clip: float = 1.0) -> list[dict]:
    """VTM + MLM pretraining.  Deterministic for a fixed seed and config.

    Per step: sample a VTM batch, corrupt text, forward with a sampled
    LayerDrop mask, sum the two losses, backward, clip, Adam step under the
    schedule's freeze stage.  Metrics are returned and optionally appended
    as JSON lines.  Divergence (non-finite loss) restores the last good
    parameters and raises NumericError.
    """
    cfg = model.cfg.encoder
    opt = Adam(model.params, lr=lr, weight_decay=weight_decay)
    schedule = schedule or constant_schedule(steps)
    metrics: list[dict] = []
    log_f = open(log_path, "w") if log_path else None
    last_good = {n: t.data.copy() for n, t in model.params.items()}
    try:
        for step in range(steps):
            step_rng = rng.child(f"step{step}")
            schedule.apply(model.params, step)
            layer_mask = sample_layerdrop_mask(
                cfg.k, cfg.p_ld if layerdrop else 0.0,
                step_rng.child("ld"), mode="train")
            batch = make_vtm_batch(items, batch_size, step_rng.child("batch"))
            model.params.zero_grads()
            tot_lv = tot_lm = 0.0
            vtm_hits = mlm_hits = mlm_total = 0
            for bi, (v_item, t_item, label) in enumerate(batch):
                lv, lm, ok, mh, mt = _forward_pretrain_item(
                    model, v_item, t_item, label,
                    step_rng.child(f"mask{bi}"), layer_mask)
                loss = T.scale(T.add(lv, lm), 1.0 / batch_size)
                T.backward(loss)
                tot_lv += float(lv.data) / batch_size
                tot_lm += float(lm.data) / batch_size
                vtm_hits += ok
                mlm_hits += mh
                mlm_total += mt
            if not (np.isfinite(tot_lv) and np.isfinite(tot_lm)):
                for n, t in model.params.items():
                    t.data = last_good[n]
                raise NumericError(f"loss diverged at step {step}")
            clip_grad_norm(model.params, grad_clip)
            opt.step()
            last_good = {n: t.data.copy() for n, t in model.params.items()}
            rec = {"step": step, "loss_vtm": round(tot_lv, 6),
                   "loss_mlm": round(tot_lm, 6),
                   "acc_vtm": vtm_hits / batch_size,
                   "acc_mlm": mlm_hits / max(1, mlm_total)}
            metrics.append(rec)
            if log_f:
                log_f.write(json.dumps(rec, sort_keys=True) + "\n")
    finally:
        if log_f:
            log_f.close()
    model.params.unfreeze_all()
    return metrics


def finetune_retrieval(model: VisionLanguageModel, items: list[CorpusItem],
                       mode: str, steps: int, rng: RngStream,
                       lr: float = 3e-4, batch_size: int = 8,
                       tau: float = 0.07, layerdrop: bool = False,
                       weight_decay: float = 0.001) -> list[dict]:
    """Retrieval finetuning: VTM binary CE for single/mixed, contrastive for multi."""
    cfg = model.cfg.encoder
    opt = Adam(model.params, lr=lr, weight_decay=weight_decay)
    metrics = []
    for step in range(steps):
        step_rng = rng.child(f"ft{step}")
        layer_mask = sample_layerdrop_mask(
            cfg.k, cfg.p_ld if layerdrop else 0.0,
            step_rng.child("ld"), mode="train")
        model.params.zero_grads()
        if mode == "multi":
            loss_val = _contrastive_step(model, items, batch_size, step_rng,
                                         tau, layer_mask)
        elif mode in ("single", "mixed"):
            loss_val = _vtm_pair_step(model, items, batch_size, step_rng,
                                      mode, layer_mask)
        else:
            raise ParameterError(f"unknown stream mode {mode!r}")
        if not np.isfinite(loss_val):
            raise NumericError(f"retrieval finetune diverged at step {step}")
        clip_grad_norm(model.params)
        opt.step()
        metrics.append({"step": step, "loss": round(loss_val, 6)})
    return metrics


def _vtm_pair_step(model, items, batch_size, rng, mode, layer_mask) -> float:
    batch = make_vtm_batch(items, batch_size, rng.child("batch"))
    total = 0.0
    for v_item, t_item, label in batch:
        text = model.text_input(t_item.caption)
        if mode == "single":
            enc = model.encode(item_vision(v_item), text, layer_mask)
            z_keys = enc.z_e
        else:  # mixed: per-modality encodes, decode over the concatenation
            z_v = model.encode_modality(vision=item_vision(v_item),
                                        layer_mask=layer_mask).z_e
            z_t = model.encode_modality(text=text, layer_mask=layer_mask).z_e
            z_keys = T.concat_rows([z_v, z_t])
        q = model.decoder.build_vtm_query()
        logits = model.decoder.head_logits(model.decoder.decode(z_keys, q),
                                           q, "VTM")
        loss = T.scale(loss_vtm(logits, [label]), 1.0 / batch_size)
        T.backward(loss)
        total += float(loss.data) * batch_size
    return total / batch_size


def _contrastive_step(model, items, batch_size, rng, tau, layer_mask) -> float:
    picks = rng.child("batch").choice(len(items), size=min(batch_size, len(items)),
                                      replace=False)
    pooled_v, pooled_t = [], []
    for i in np.atleast_1d(picks):
        it = items[int(i)]
        z_v = model.encode_modality(vision=item_vision(it),
                                    layer_mask=layer_mask).z_e
        z_t = model.encode_modality(text=model.text_input(it.caption),
                                    layer_mask=layer_mask).z_e
        q_v = model.decoder.build_ret_query()
        pooled_v.append(model.decoder.decode(z_v, q_v))
        q_t = model.decoder.build_ret_query()
        pooled_t.append(model.decoder.decode(z_t, q_t))
    v = T.l2_normalize_rows(T.concat_rows(pooled_v))
    t = T.l2_normalize_rows(T.concat_rows(pooled_t))
    sim = T.scale(T.matmul(t, T.transpose_last2(v)), 1.0 / tau)
    loss = loss_contrastive(sim)
    T.backward(loss)
    return float(loss.data)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def eval_vtm_accuracy(model, items: list[CorpusItem], rng: RngStream,
                      n_pairs: int = 64) -> float:
    """Match/non-match classification accuracy on balanced sampled pairs."""
    batch = make_vtm_batch(items, n_pairs, rng)
    hits = 0
    with no_grad():
        for v_item, t_item, label in batch:
            text = model.text_input(t_item.caption)
            enc = model.encode(item_vision(v_item), text)
            q = model.decoder.build_vtm_query()
            logits = model.decoder.head_logits(
                model.decoder.decode(enc.z_e, q), q, "VTM")
            hits += int(np.argmax(logits.data[0]) == label)
    return hits / n_pairs


def eval_mlm_accuracy(model, items: list[CorpusItem], rng: RngStream,
                      passes: int = 2) -> float:
    hits = total = 0
    with no_grad():
        for rep in range(passes):
            for it in items:
                text = model.text_input(it.caption)
                masked_ids, flags, targets = mask_tokens(
                    text, rng.child(f"{rep}.{it.item_id}"))
                if not flags.any():
                    continue
                masked = TextInput(token_ids=masked_ids,
                                   attention_mask=text.attention_mask)
                _, mlm_logits = model.pretrain_forward(item_vision(it), masked,
                                                       flags)
                pred = mlm_logits.data[flags].argmax(axis=-1)
                hits += int((pred == targets[flags]).sum())
                total += int(flags.sum())
    return hits / max(1, total)


def eval_retrieval(model, items: list[CorpusItem], mode: str = "mixed",
                   cache=None, layer_mask=None, tau: float = 0.07) -> dict:
    """Text-to-vision R@1/5/10 where each caption's gold item is its own visual."""
    sim = similarity_matrix(model, items, mode=mode, cache=cache,
                            layer_mask=layer_mask, tau=tau)
    ranking = rank(sim)
    gold = np.arange(len(items))
    return {f"r@{k}": recall_at_k(ranking, gold, k) for k in (1, 5, 10)}


def eval_qa_accuracy(model, items: list[CorpusItem]) -> float:
    answers = list(ANSWER_VOCAB)
    hits = total = 0
    with no_grad():
        for it in items:
            for question, answer in it.qa:
                logits = model.qa_forward(item_vision(it),
                                          model.text_input(question))
                hits += int(answers[int(np.argmax(logits.data[0]))] == answer)
                total += 1
    return hits / max(1, total)


def finetune_qa(model, items: list[CorpusItem], steps: int, rng: RngStream,
                lr: float = 3e-4, batch_size: int = 8,
                layerdrop: bool = False) -> list[dict]:
    answers = {a: i for i, a in enumerate(ANSWER_VOCAB)}
    pairs = [(it, q, answers[a]) for it in items for q, a in it.qa]
    cfg = model.cfg.encoder
    opt = Adam(model.params, lr=lr)
    metrics = []
    for step in range(steps):
        step_rng = rng.child(f"qa{step}")
        layer_mask = sample_layerdrop_mask(
            cfg.k, cfg.p_ld if layerdrop else 0.0,
            step_rng.child("ld"), mode="train")
        picks = step_rng.child("batch").integers(len(pairs), size=batch_size)
        model.params.zero_grads()
        total = 0.0
        for i in np.atleast_1d(picks):
            it, question, target = pairs[int(i)]
            logits = model.qa_forward(item_vision(it),
                                      model.text_input(question), layer_mask)
            loss = T.scale(T.cross_entropy_rows(logits, [target]),
                           1.0 / batch_size)
            T.backward(loss)
            total += float(loss.data)
        clip_grad_norm(model.params)
        opt.step()
        metrics.append({"step": step, "loss": round(total, 6)})
    return metrics
