"""Synthetic vision-language corpus: rendered shapes with grammar captions.

Scenes contain one or two colored geometric shapes on a dark background;
captions are a deterministic function of the scene ("a red circle above a
blue square", "a green square moving right").  Videos translate a shape
linearly across frames so temporal embeddings carry real signal.  Rendering
is procedural (boolean masks, no anti-aliasing) and byte-reproducible.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ParameterError
from .rng import RngStream

COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.1),
    "blue": (0.15, 0.25, 0.9),
    "yellow": (0.9, 0.85, 0.1),
}
SHAPES = ("circle", "square", "triangle")
MOTIONS = ("right", "left", "down", "up")
ANSWER_VOCAB = tuple(COLORS) + SHAPES + ("1", "2", "3", "4")


@dataclass
class SceneObject:
    shape: str
    color: str
    cy: float   # center, in [0,1] frame coordinates
    cx: float
    size: float = 0.22
    motion: str | None = None


@dataclass
class CorpusItem:
    item_id: int
    split: str
    frames: np.ndarray          # (L, H, W, 3) float32 in [0,1]
    is_video: bool
    caption: str
    qa: list[tuple[str, str]]


def _draw_object(img: np.ndarray, obj: SceneObject) -> None:
    h, w, _ = img.shape
    cy, cx, r = obj.cy * h, obj.cx * w, obj.size * h / 2
    yy, xx = np.mgrid[0:h, 0:w]
    if obj.shape == "circle":
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    elif obj.shape == "square":
        mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    elif obj.shape == "triangle":
        # upward triangle: apex at cy - r, base at cy + r
        inside_y = (yy >= cy - r) & (yy <= cy + r)
        half_width = (yy - (cy - r)) / 2.0
        mask = inside_y & (np.abs(xx - cx) <= half_width)
    else:
        raise ParameterError(f"unknown shape {obj.shape!r}")
    img[mask] = COLORS[obj.color]


def render_scene(objects: list[SceneObject], image_size: int,
                 n_frames: int = 1) -> np.ndarray:
    frames = np.full((n_frames, image_size, image_size, 3), 0.05,
                     dtype=np.float32)
    step = {"right": (0.0, 0.15), "left": (0.0, -0.15),
            "down": (0.15, 0.0), "up": (-0.15, 0.0)}
    for f in range(n_frames):
        img = frames[f]
        for obj in objects:
            dy, dx = step[obj.motion] if obj.motion else (0.0, 0.0)
            moved = SceneObject(obj.shape, obj.color,
                                np.clip(obj.cy + dy * f, 0.15, 0.85),
                                np.clip(obj.cx + dx * f, 0.15, 0.85),
                                obj.size)
            _draw_object(img, moved)
    return frames


def caption_for(objects: list[SceneObject]) -> str:
    if len(objects) == 1:
        o = objects[0]
        if o.motion:
            return f"a {o.color} {o.shape} moving {o.motion}"
        return f"a {o.color} {o.shape}"
    a, b = objects
    if abs(a.cy - b.cy) >= abs(a.cx - b.cx):
        rel = "above" if a.cy < b.cy else "below"
    else:
        rel = "left of" if a.cx < b.cx else "right of"
    return f"a {a.color} {a.shape} {rel} a {b.color} {b.shape}"


def qa_for(objects: list[SceneObject]) -> list[tuple[str, str]]:
    qa = [("how many shapes are there", str(len(objects)))]
    shapes = [o.shape for o in objects]
    colors = [o.color for o in objects]
    for o in objects:
        if shapes.count(o.shape) == 1:
            qa.append((f"what color is the {o.shape}", o.color))
        if colors.count(o.color) == 1:
            qa.append((f"what shape is {o.color}", o.shape))
    return qa


def _random_scene(rng: RngStream, as_video: bool) -> list[SceneObject]:
    n_obj = 1 if as_video else (1 if rng.random() < 0.5 else 2)
    cells = [(0.28, 0.28), (0.28, 0.72), (0.72, 0.28), (0.72, 0.72)]
    picks = rng.choice(len(cells), size=n_obj, replace=False)
    objects = []
    for idx in np.atleast_1d(picks):
        cy, cx = cells[int(idx)]
        objects.append(SceneObject(
            shape=SHAPES[int(rng.integers(len(SHAPES)))],
            color=list(COLORS)[int(rng.integers(len(COLORS)))],
            cy=cy + float(rng.uniform(-0.04, 0.04)),
            cx=cx + float(rng.uniform(-0.04, 0.04)),
            motion=MOTIONS[int(rng.integers(len(MOTIONS)))] if as_video else None,
        ))
    return objects


def gen_corpus(seed: int, counts: dict[str, int] | None = None,
               image_size: int = 64, video_fraction: float = 0.25,
               video_frames: int = 4) -> list[CorpusItem]:
    """Deterministic synthetic corpus; same seed -> identical items."""
    counts = counts or {"train": 64, "val": 16, "test": 16}
    for split, n in counts.items():
        if n < 2:
            raise ParameterError(f"split {split!r} needs >= 2 items, got {n}")
    items = []
    next_id = 0
    root = RngStream(seed).child("corpus")
    for split in ("train", "val", "test"):
        if split not in counts:
            continue
        for j in range(counts[split]):
            rng = root.child(f"{split}.{j}")
            as_video = rng.random() < video_fraction
            objects = _random_scene(rng.child("scene"), as_video)
            frames = render_scene(objects, image_size,
                                  video_frames if as_video else 1)
            items.append(CorpusItem(
                item_id=next_id, split=split, frames=frames,
                is_video=as_video, caption=caption_for(objects),
                qa=qa_for(objects)))
            next_id += 1
    return items


# ---------------------------------------------------------------------------
# on-disk format: JSONL index + packed binary of raw f32 pixel tensors
# ---------------------------------------------------------------------------

def save_corpus(items: list[CorpusItem], index_path: str) -> None:
    media_path = os.path.splitext(index_path)[0] + ".bin"
    offset = 0
    with open(index_path, "w") as idx, open(media_path, "wb") as media:
        for it in items:
            raw = np.ascontiguousarray(it.frames, dtype="<f4").tobytes()
            rec = {"id": it.item_id, "split": it.split, "caption": it.caption,
                   "qa": it.qa, "is_video": it.is_video,
                   "frames_shape": list(it.frames.shape),
                   "media_offset": offset, "media_bytes": len(raw)}
            idx.write(json.dumps(rec, sort_keys=True) + "\n")
            media.write(raw)
            offset += len(raw)


def load_corpus(index_path: str) -> list[CorpusItem]:
    media_path = os.path.splitext(index_path)[0] + ".bin"
    items = []
    with open(index_path) as idx, open(media_path, "rb") as media:
        for line in idx:
            rec = json.loads(line)
            media.seek(rec["media_offset"])
            raw = media.read(rec["media_bytes"])
            frames = np.frombuffer(raw, dtype="<f4").reshape(rec["frames_shape"])
            items.append(CorpusItem(
                item_id=rec["id"], split=rec["split"],
                frames=frames.copy(), is_video=rec["is_video"],
                caption=rec["caption"],
                qa=[tuple(p) for p in rec["qa"]]))
    return items


def split_items(items: list[CorpusItem], split: str) -> list[CorpusItem]:
    out = [it for it in items if it.split == split]
    if not out:
        raise ContractError(f"no items in split {split!r}")
    return out
