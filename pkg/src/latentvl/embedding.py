"""Input array construction from raw vision and text.

Each input row is the sum of modality, temporal, positional and patch/token
embeddings.  Images are routed through the video path as single-frame videos
with the temporal term omitted, so the two paths are bit-identical.
Visual rows come first, then text rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import CapacityError, ContractError, ShapeError
from .rng import RngStream
from .tensor import ParamStore, Tensor

MODALITY_VISION = 0
MODALITY_TEXT = 1


class ByteTokenizer:
    """Byte-level toy vocabulary: 256 bytes + PAD, MASK, CLS, UNK."""

    PAD = 256
    MASK = 257
    CLS = 258
    UNK = 259
    VOCAB_SIZE = 260

    def encode(self, text: str, max_len: int) -> tuple[np.ndarray, np.ndarray]:
        """Returns (token_ids, attention_mask), padded to max_len."""
        raw = text.encode("utf-8")[:max_len]
        ids = np.full(max_len, self.PAD, dtype=np.int64)
        mask = np.zeros(max_len, dtype=bool)
        ids[: len(raw)] = np.frombuffer(raw, dtype=np.uint8)
        mask[: len(raw)] = True
        return ids, mask

    def decode(self, ids) -> str:
        out = bytearray()
        for i in np.asarray(ids).tolist():
            if i < 256:
                out.append(i)
        return out.decode("utf-8", errors="replace")


@dataclass
class VisionInput:
    """frames: (L_V, H, W, C) pixel array with values in [0, 1]."""

    frames: np.ndarray
    is_video: bool = False

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4:
            raise ShapeError(f"frames must be (L_V,H,W,C), got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise ShapeError("need at least one frame")


@dataclass
class TextInput:
    token_ids: np.ndarray
    attention_mask: np.ndarray

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.attention_mask = np.asarray(self.attention_mask, dtype=bool)
        if self.token_ids.shape != self.attention_mask.shape:
            raise ShapeError("token_ids and attention_mask lengths differ")


@dataclass
class InputArray:
    """The M x d input array c, with per-row modality tags and padding mask."""

    rows: Tensor
    modality_of_row: np.ndarray  # int array of MODALITY_* tags
    attend_mask: np.ndarray      # bool; False rows are excluded from attention

    @property
    def length(self) -> int:
        return self.rows.data.shape[0]


@dataclass
class EmbedConfig:
    d: int = 64
    patch: int = 8
    channels: int = 3
    max_frames: int = 4
    max_patches: int = 64   # per frame
    max_text_len: int = 40
    vocab_size: int = ByteTokenizer.VOCAB_SIZE

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels


class EmbeddingTables:
    """Learned embedding tables registered in a ParamStore under 'embed.'."""

    def __init__(self, store: ParamStore, cfg: EmbedConfig, rng: RngStream,
                 dtype=np.float32):
        self.cfg = cfg
        d = cfg.d
        std = 0.02

        def init(name, shape, stream):
            return store.add(f"embed.{name}",
                             rng.child(stream).truncated_normal(std, shape),
                             dtype=dtype)

        self.modality_emb = init("modality", (2, d), "modality")
        self.temporal_emb = init("temporal", (cfg.max_frames, d), "temporal")
        self.patch_pos_emb = init("patch_pos", (cfg.max_patches, d), "patch_pos")
        self.token_pos_emb = init("token_pos", (cfg.max_text_len, d), "token_pos")
        self.patch_proj = init("patch_proj", (cfg.patch_dim, d), "patch_proj")
        self.patch_proj_bias = store.add("embed.patch_proj_bias",
                                         np.zeros(d), dtype=dtype)
        self.token_emb = init("token", (cfg.vocab_size, d), "token")


def patchify(v: VisionInput, patch: int) -> np.ndarray:
    """Non-overlapping patches, frame-major then row-major within a frame.

    Each patch is flattened in (py, px, channel) order.  Returns an
    (L_V * L_P, patch*patch*C) array.
    """
    lv, h, w, c = v.frames.shape
    if h % patch or w % patch:
        raise ShapeError(f"frame {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = v.frames.reshape(lv, gh, patch, gw, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)          # (lv, gh, gw, patch, patch, c)
    return x.reshape(lv * gh * gw, patch * patch * c)


def embed_vision(v: VisionInput, tables: EmbeddingTables) -> Tensor:
    """rows(f,p) = patch_proj(patch) + patch_pos[p] + modality[V] (+ temporal[f])."""
    cfg = tables.cfg
    lv = v.frames.shape[0]
    if lv > cfg.max_frames:
        raise CapacityError(f"{lv} frames exceeds max_frames={cfg.max_frames}")
    patches = patchify(v, cfg.patch)
    lp = patches.shape[0] // lv
    if lp > cfg.max_patches:
        raise CapacityError(f"{lp} patches/frame exceeds max_patches={cfg.max_patches}")

    proj = T.add_bias(
        T.matmul(Tensor(patches.astype(tables.patch_proj.dtype)), tables.patch_proj),
        tables.patch_proj_bias,
    )
    pos = T.embedding_lookup(tables.patch_pos_emb, np.tile(np.arange(lp), lv))
    mod = T.embedding_lookup(tables.modality_emb,
                             np.full(lv * lp, MODALITY_VISION, dtype=np.int64))
    rows = T.add(T.add(proj, pos), mod)
    if v.is_video:
        frame_ids = np.repeat(np.arange(lv), lp)
        rows = T.add(rows, T.embedding_lookup(tables.temporal_emb, frame_ids))
    return rows


def embed_text(t: TextInput, tables: EmbeddingTables) -> Tensor:
    """rows(i) = token_emb[id_i] + token_pos[i] + modality[T].  No temporal term."""
    cfg = tables.cfg
    lt = t.token_ids.shape[0]
    if lt > cfg.max_text_len:
        raise CapacityError(f"text length {lt} exceeds max_text_len={cfg.max_text_len}")
    tok = T.embedding_lookup(tables.token_emb, t.token_ids)
    pos = T.embedding_lookup(tables.token_pos_emb, np.arange(lt))
    mod = T.embedding_lookup(tables.modality_emb,
                             np.full(lt, MODALITY_TEXT, dtype=np.int64))
    return T.add(T.add(tok, pos), mod)


def build_input_array(tables: EmbeddingTables,
                      vision: VisionInput | None = None,
                      text: TextInput | None = None) -> InputArray:
    """Concatenate visual rows then text rows into the input array c."""
    if vision is None and text is None:
        raise ContractError("build_input_array needs at least one modality")
    parts, tags, mask = [], [], []
    if vision is not None:
        rows = embed_vision(vision, tables)
        n = rows.data.shape[0]
        parts.append(rows)
        tags.append(np.full(n, MODALITY_VISION, dtype=np.int64))
        mask.append(np.ones(n, dtype=bool))
    if text is not None and text.token_ids.shape[0] > 0:
        rows = embed_text(text, tables)
        parts.append(rows)
        tags.append(np.full(text.token_ids.shape[0], MODALITY_TEXT, dtype=np.int64))
        mask.append(text.attention_mask.copy())
    if not parts:
        raise ContractError("build_input_array: empty input")
    rows = parts[0] if len(parts) == 1 else T.concat_rows(parts)
    return InputArray(rows=rows,
                      modality_of_row=np.concatenate(tags),
                      attend_mask=np.concatenate(mask))
