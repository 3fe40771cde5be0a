"""Iterative latent cross-attention encoder.

A learned N x d latent array repeatedly cross-attends to the M x d input
array (k blocks of one cross-attention followed by l latent self-attentions),
so the cost of reading the input is O(k*M*N) instead of the O(k*l*M^2) a
same-depth self-attention stack would pay.  Cross-attention layers after the
first may be stochastically skipped (LayerDrop) during training, and a fixed
number of them can be run at inference for on-demand depth reduction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, ParameterError, ShapeError
from .rng import RngStream
from .tensor import ParamStore, Tensor

AGGREGATIONS = ("joint", "separate", "separate+")
LATENT_POS_MODES = ("learned", "fourier")


@dataclass
class EncoderConfig:
    """Architectural knobs for the latent encoder.

    Defaults are desk scale; the reference configuration uses d=768,
    heads=12, k=3, n_latents=128, p_ld=0.5.
    """

    d: int = 64
    heads: int = 4
    k: int = 3
    l: int = 4
    n_latents: int = 16
    p_ld: float = 0.5
    aggregation: str = "joint"
    latent_pos: str = "learned"
    mlp_ratio: int = 4
    fourier_bands: int = 8
    share_cross_weights: bool = False

    def __post_init__(self):
        if self.d % self.heads:
            raise ParameterError(f"d={self.d} not divisible by heads={self.heads}")
        if self.k < 1 or self.n_latents < 1 or self.l < 0:
            raise ParameterError("need k >= 1, n_latents >= 1, l >= 0")
        if not 0.0 <= self.p_ld < 1.0:
            raise ParameterError(f"p_ld must be in [0,1), got {self.p_ld}")
        if self.aggregation not in AGGREGATIONS:
            raise ParameterError(f"unknown aggregation {self.aggregation!r}")
        if self.latent_pos not in LATENT_POS_MODES:
            raise ParameterError(f"unknown latent_pos {self.latent_pos!r}")


@dataclass
class EncodedLatent:
    z_e: Tensor
    active_cross_layers: list[bool]


class Linear:
    """d_in -> d_out affine map registered in a ParamStore."""

    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 rng: RngStream, dtype=np.float32):
        std = 0.02
        self.w = store.add(f"{name}.w", rng.truncated_normal(std, (d_in, d_out)),
                           dtype=dtype)
        self.b = store.add(f"{name}.b", np.zeros(d_out), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add_bias(T.matmul(x, self.w), self.b)


class LayerNormParams:
    def __init__(self, store: ParamStore, name: str, d: int, dtype=np.float32):
        self.gamma = store.add(f"{name}.gamma", np.ones(d), dtype=dtype)
        self.beta = store.add(f"{name}.beta", np.zeros(d), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


class AttentionLayer:
    """Pre-LN multi-head attention + residual MLP.

    Cross-attention: queries from `q_src`, keys/values from `kv_src`.
    Self-attention: call with kv_src=None.  MAC cost per call (matmuls only):
    queries Q, keys M, width d -> 2*Q*d^2 (q/out proj) + 2*M*d^2 (k/v proj)
    + 2*Q*M*d (scores + context) + 8*Q*d^2 (MLP); self-attention reuses the
    same projections with M == Q.
    """

    def __init__(self, store: ParamStore, name: str, d: int, heads: int,
                 mlp_ratio: int, rng: RngStream, dtype=np.float32):
        self.d = d
        self.heads = heads
        self.ln_q = LayerNormParams(store, f"{name}.ln_q", d, dtype)
        self.ln_kv = LayerNormParams(store, f"{name}.ln_kv", d, dtype)
        self.ln_mlp = LayerNormParams(store, f"{name}.ln_mlp", d, dtype)
        self.w_q = Linear(store, f"{name}.w_q", d, d, rng.child("wq"), dtype)
        self.w_k = Linear(store, f"{name}.w_k", d, d, rng.child("wk"), dtype)
        self.w_v = Linear(store, f"{name}.w_v", d, d, rng.child("wv"), dtype)
        self.w_o = Linear(store, f"{name}.w_o", d, d, rng.child("wo"), dtype)
        hidden = d * mlp_ratio
        self.mlp_in = Linear(store, f"{name}.mlp_in", d, hidden, rng.child("m1"), dtype)
        self.mlp_out = Linear(store, f"{name}.mlp_out", hidden, d, rng.child("m2"), dtype)

    def attend(self, q_src: Tensor, kv_src: Tensor | None,
               kv_mask: np.ndarray | None = None) -> Tensor:
        is_self = kv_src is None
        qn = self.ln_q(q_src)
        kn = qn if is_self else self.ln_kv(kv_src)
        if not is_self and kv_src.data.shape[0] == 0:
            raise ContractError("cross-attention over an empty input")
        if kv_mask is not None and not kv_mask.any():
            raise ContractError("cross-attention with every input position masked")
        q = T.split_heads(self.w_q(qn), self.heads)
        k = T.split_heads(self.w_k(kn), self.heads)
        v = T.split_heads(self.w_v(kn), self.heads)
        scores = T.bmm(q, T.transpose_last2(k))
        scores = T.scale(scores, 1.0 / math.sqrt(self.d / self.heads))
        attn = T.softmax_rows(scores, mask=None if kv_mask is None else kv_mask[None, None, :])
        ctx = T.merge_heads(T.bmm(attn, v))
        return T.add(q_src, self.w_o(ctx))

    def mlp(self, x: Tensor) -> Tensor:
        return T.add(x, self.mlp_out(T.gelu(self.mlp_in(self.ln_mlp(x)))))

    def __call__(self, q_src: Tensor, kv_src: Tensor | None = None,
                 kv_mask: np.ndarray | None = None) -> Tensor:
        return self.mlp(self.attend(q_src, kv_src, kv_mask))


def fourier_features(n: int, bands: int) -> np.ndarray:
    """Raw Fourier position features for latent index i in [0, n).

    x = 2i/(n-1) - 1 (0 for n == 1); features are [x, sin(pi f_j x),
    cos(pi f_j x)] with f_j log-spaced in [1, n/2].  Shape (n, 2*bands + 1).
    """
    if bands < 1:
        raise ParameterError(f"bands must be >= 1, got {bands}")
    if n == 1:
        x = np.zeros(1)
    else:
        x = 2.0 * np.arange(n) / (n - 1) - 1.0
    freqs = np.logspace(0.0, math.log10(max(n / 2.0, 1.0)), bands)
    angles = math.pi * x[:, None] * freqs[None, :]
    return np.concatenate([x[:, None], np.sin(angles), np.cos(angles)], axis=1)


def sample_layerdrop_mask(k: int, p_ld: float, rng: RngStream | None,
                          mode="eval") -> list[bool]:
    """Which of the k cross-attention layers run.  Index 0 is always active.

    mode: "train" drops layers 1..k-1 independently with probability p_ld;
    "eval" keeps all; ("fixed", c) keeps exactly the first c layers.
    """
    if k < 1:
        raise ParameterError("k must be >= 1")
    if isinstance(mode, tuple) and mode[0] == "fixed":
        c = int(mode[1])
        if not 1 <= c <= k:
            raise ParameterError(f"fixed layer count {c} outside 1..{k}")
        return [i < c for i in range(k)]
    if mode == "eval":
        return [True] * k
    if mode == "train":
        draws = rng.random(k) if k else []
        return [True] + [bool(draws[i] >= p_ld) for i in range(1, k)]
    raise ParameterError(f"unknown layerdrop mode {mode!r}")


class LatentEncoder:
    """The latent array plus k blocks of (cross-attention + l self-attentions)."""

    def __init__(self, store: ParamStore, cfg: EncoderConfig, rng: RngStream,
                 dtype=np.float32):
        self.cfg = cfg
        n, d = cfg.n_latents, cfg.d
        self.latent_base = store.add("latent.base",
                                     rng.child("latent").truncated_normal(0.02, (n, d)),
                                     dtype=dtype)
        if cfg.latent_pos == "learned":
            self.latent_pos = store.add(
                "latent.pos", rng.child("latent_pos").truncated_normal(0.02, (n, d)),
                dtype=dtype)
            self.fourier_proj = None
        else:
            feat_dim = 2 * cfg.fourier_bands + 1
            self.fourier_proj = Linear(store, "latent.fourier_proj", feat_dim, d,
                                       rng.child("fpos"), dtype)
            self._fourier_raw = fourier_features(n, cfg.fourier_bands).astype(dtype)
            self.latent_pos = None

        def make_cross(i, suffix=""):
            if cfg.share_cross_weights and i > 0:
                return None  # resolved to layer 0 at call time
            return AttentionLayer(store, f"enc.cross{i}{suffix}", d, cfg.heads,
                                  cfg.mlp_ratio, rng.child(f"cross{i}{suffix}"), dtype)

        n_streams = 1 if cfg.aggregation == "joint" else 2
        self.cross = []
        for s in range(n_streams):
            suffix = "" if n_streams == 1 else f".m{s}"
            layers = [make_cross(i, suffix) for i in range(cfg.k)]
            if cfg.share_cross_weights:
                layers = [layers[0]] * cfg.k
            self.cross.append(layers)
        # separate+ runs a self-attention stack after each modality's
        # cross-attention, so those blocks carry 2*l self layers.
        n_self = cfg.l * (2 if cfg.aggregation == "separate+" else 1)
        self.selfattn = [
            [AttentionLayer(store, f"enc.block{i}.self{j}", d, cfg.heads,
                            cfg.mlp_ratio, rng.child(f"self{i}.{j}"), dtype)
             for j in range(n_self)]
            for i in range(cfg.k)
        ]

    def initial_latent(self) -> Tensor:
        if self.latent_pos is not None:
            return T.add(self.latent_base, self.latent_pos)
        pos = self.fourier_proj(Tensor(self._fourier_raw))
        return T.add(self.latent_base, pos)

    def encode(self, inputs, layer_mask: list[bool] | None = None) -> EncodedLatent:
        """Run the iterative encoder over one or two input arrays.

        `inputs` is a single InputArray for joint aggregation, or a list of
        per-modality InputArrays for separate / separate+.  `layer_mask`
        (length k, index 0 True) selects which cross-attention blocks run;
        a dropped block skips both the attention and its attached MLP.
        """
        cfg = self.cfg
        if layer_mask is None:
            layer_mask = [True] * cfg.k
        if len(layer_mask) != cfg.k or not layer_mask[0]:
            raise ContractError("layer_mask must have length k with index 0 active")

        if cfg.aggregation == "joint":
            if isinstance(inputs, (list, tuple)):
                if len(inputs) != 1:
                    raise ContractError("joint aggregation takes exactly one input array")
                inputs = inputs[0]
            streams = [inputs]
        else:
            if not isinstance(inputs, (list, tuple)) or len(inputs) != 2:
                raise ContractError(
                    f"{cfg.aggregation} aggregation takes exactly two input arrays")
            streams = list(inputs)

        z = self.initial_latent()
        for i in range(cfg.k):
            if cfg.aggregation == "separate+":
                for s, inp in enumerate(streams):
                    if layer_mask[i]:
                        z = self.cross[s][i](z, inp.rows, inp.attend_mask)
                    for layer in self.selfattn[i][s * cfg.l:(s + 1) * cfg.l]:
                        z = layer(z)
                continue
            if layer_mask[i]:
                if cfg.aggregation == "joint":
                    z = self.cross[0][i](z, streams[0].rows, streams[0].attend_mask)
                else:  # separate: serial per-modality cross-attentions
                    for s, inp in enumerate(streams):
                        z = self.cross[s][i](z, inp.rows, inp.attend_mask)
            for layer in self.selfattn[i]:
                z = layer(z)
        return EncodedLatent(z_e=z, active_cross_layers=list(layer_mask))
