"""Synthetic paired video-caption corpus.

Each sample is a moving colored shape rendered over a solid background,
captioned by a fixed template.  Caption <-> scene is a bijection, so
perfect retrieval is attainable in principle and metrics are exactly
interpretable.  Everything here is a pure function of (spec, seed).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch

from .masking import (
    NoEligibleTokenError,
    TextMaskSpec,
    VideoMaskSpec,
    apply_text_mask,
    make_text_mask,
    make_video_mask,
    pos_tag,
)
from .substrate import Rng

SHAPES = ("square", "circle", "triangle", "bar")
COLORS = (
    "red",
    "green",
    "blue",
    "yellow",
    "cyan",
    "magenta",
    "orange",
    "purple",
)
MOTIONS = ("left", "right", "up", "down", "still", "spin")

PALETTE = {
    "red": (0.9, 0.15, 0.15),
    "green": (0.15, 0.8, 0.2),
    "blue": (0.15, 0.25, 0.9),
    "yellow": (0.95, 0.9, 0.2),
    "cyan": (0.15, 0.85, 0.85),
    "magenta": (0.85, 0.2, 0.85),
    "orange": (0.95, 0.55, 0.1),
    "purple": (0.55, 0.2, 0.75),
}

# motion -> (verb, adverb); verbs are distinct so captions of distinct
# scenes always differ in at least one content word.
MOTION_PHRASES = {
    "left": ("sliding", "left"),
    "right": ("gliding", "right"),
    "up": ("rising", "up"),
    "down": ("falling", "down"),
    "still": ("sitting", "still"),
    "spin": ("spinning", "around"),
}

PAD, CLS, MASK = "[PAD]", "[CLS]", "[MASK]"


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    color: str
    motion: str
    background: str
    frames: int = 4
    height: int = 32
    width: int = 32

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS or self.background not in COLORS:
            raise ValueError("unknown color")
        if self.motion not in MOTIONS:
            raise ValueError(f"unknown motion {self.motion!r}")
        if self.color == self.background:
            raise ValueError("foreground color equals background color")


def caption(scene: SceneSpec) -> list[str]:
    verb, adverb = MOTION_PHRASES[scene.motion]
    return [
        "a",
        scene.color,
        scene.shape,
        verb,
        adverb,
        "over",
        "a",
        scene.background,
        "background",
    ]


def _shape_mask(shape: str, xr: np.ndarray, yr: np.ndarray, r: float) -> np.ndarray:
    if shape == "square":
        return np.maximum(np.abs(xr), np.abs(yr)) <= 0.8 * r
    if shape == "circle":
        return xr * xr + yr * yr <= r * r
    if shape == "triangle":
        t = (yr + r) / (2.0 * r)
        return (np.abs(yr) <= r) & (np.abs(xr) <= t * r)
    if shape == "bar":
        return (np.abs(xr) <= 1.3 * r) & (np.abs(yr) <= 0.4 * r)
    raise ValueError(shape)


def render(scene: SceneSpec) -> np.ndarray:
    """Rasterize the clip, (F, H, W, 3) float32 in [0, 1]."""
    f, h, w = scene.frames, scene.height, scene.width
    bg = np.array(PALETTE[scene.background], dtype=np.float32)
    fg = np.array(PALETTE[scene.color], dtype=np.float32)
    clip = np.empty((f, h, w, 3), dtype=np.float32)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    r = h / 5.0
    cx0, cy0 = (w - 1) / 2.0, (h - 1) / 2.0
    span = 0.3 * w
    step = span / max(f - 1, 1)
    for k in range(f):
        off = (k - (f - 1) / 2.0) * step
        cx, cy, angle = cx0, cy0, 0.0
        if scene.motion == "left":
            cx = cx0 - off
        elif scene.motion == "right":
            cx = cx0 + off
        elif scene.motion == "up":
            cy = cy0 - off
        elif scene.motion == "down":
            cy = cy0 + off
        elif scene.motion == "spin":
            angle = k * math.pi / (2.0 * f)
        ca, sa = math.cos(angle), math.sin(angle)
        xr = ca * (xs - cx) + sa * (ys - cy)
        yr = -sa * (xs - cx) + ca * (ys - cy)
        mask = _shape_mask(scene.shape, xr, yr, r)
        frame = np.where(mask[..., None], fg, bg)
        clip[k] = frame
    return clip


def centroid_x(frame: np.ndarray, scene: SceneSpec) -> float:
    fg = np.array(PALETTE[scene.color], dtype=np.float32)
    mask = np.all(np.isclose(frame, fg), axis=-1)
    ys, xs = np.nonzero(mask)
    return float(xs.mean())


# ----------------------------------------------------------------------
# Vocabulary
# ----------------------------------------------------------------------


class Vocab:
    """Fixed word vocabulary with [PAD]=0, [CLS]=1, [MASK]=2."""

    def __init__(self, words: list[str] | None = None):
        if words is None:
            words = default_wordlist()
        self.id2word = [PAD, CLS, MASK] + list(words)
        self.word2id = {w: i for i, w in enumerate(self.id2word)}
        if len(self.word2id) != len(self.id2word):
            raise ValueError("duplicate words in vocabulary")

    def __len__(self):
        return len(self.id2word)

    @property
    def pad_id(self):
        return 0

    @property
    def cls_id(self):
        return 1

    @property
    def mask_id(self):
        return 2

    def encode(self, words: list[str], max_len: int) -> tuple[list[int], list[str]]:
        """Token ids with [CLS] first and [PAD] suffix, plus aligned tags."""
        if len(words) + 1 > max_len:
            raise ValueError(f"caption too long ({len(words) + 1} > {max_len})")
        ids = [self.cls_id] + [self.word2id[w] for w in words]
        tags = ["SPECIAL"] + pos_tag(words)
        while len(ids) < max_len:
            ids.append(self.pad_id)
            tags.append("SPECIAL")
        return ids, tags


def default_wordlist() -> list[str]:
    words = ["a", "over", "background", "what", "color", "is", "the", "shape"]
    words += list(COLORS) + list(SHAPES)
    for verb, adverb in MOTION_PHRASES.values():
        for w in (verb, adverb):
            if w not in words:
                words.append(w)
    return words


# ----------------------------------------------------------------------
# Corpus generation
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class Record:
    id: int
    scene: SceneSpec
    caption: tuple[str, ...]
    split: str


@dataclass(frozen=True)
class QaRecord:
    id: int
    scene_id: int
    split: str
    question: tuple[str, ...]
    answer: str
    candidates: tuple[str, ...] | None  # None = open-ended


def corpus_capacity() -> int:
    return len(SHAPES) * len(COLORS) * len(MOTIONS) * (len(COLORS) - 1)


def generate_corpus(
    n: int,
    seed: int,
    frames: int = 4,
    height: int = 32,
    width: int = 32,
) -> tuple[list[Record], list[QaRecord]]:
    """n distinct scenes with an 80/10/10 split, plus QA for every scene."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cap = corpus_capacity()
    if n > cap:
        raise ValueError(f"n={n} exceeds distinct-spec capacity {cap}")
    combos = [
        (s, c, m, b)
        for s in SHAPES
        for c in COLORS
        for m in MOTIONS
        for b in COLORS
        if b != c
    ]
    rng = Rng(seed, stream=(0,))
    order = rng.permutation(len(combos))
    n_train = int(n * 0.8)
    n_val = int(n * 0.1)
    records: list[Record] = []
    qa: list[QaRecord] = []
    for i in range(n):
        s, c, m, b = combos[int(order[i])]
        scene = SceneSpec(s, c, m, b, frames, height, width)
        split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        records.append(Record(i, scene, tuple(caption(scene)), split))
        question = ("what", "color", "is", "the", scene.shape)
        qa.append(QaRecord(2 * i, i, split, question, scene.color, None))
        qrng = Rng(seed, stream=(3, i))
        distract = [col for col in COLORS if col != scene.color]
        picks = qrng.choice(len(distract), size=3, replace=False)
        cands = [scene.color] + [distract[int(p)] for p in picks]
        perm = qrng.permutation(4)
        cands = tuple(cands[int(p)] for p in perm)
        qa.append(QaRecord(2 * i + 1, i, split, question, scene.color, cands))
    return records, qa


def answer_classes() -> list[str]:
    return list(COLORS)


# ----------------------------------------------------------------------
# File formats (JSON-lines manifests, raw float32 clip store)
# ----------------------------------------------------------------------


def save_manifest(records: list[Record], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            row = {
                "id": r.id,
                "split": r.split,
                "caption": list(r.caption),
                "scene": asdict(r.scene),
            }
            f.write(json.dumps(row) + "\n")


def load_manifest(path: str | Path) -> list[Record]:
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            row = json.loads(line)
            records.append(
                Record(
                    id=row["id"],
                    scene=SceneSpec(**row["scene"]),
                    caption=tuple(row["caption"]),
                    split=row["split"],
                )
            )
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate ids in manifest")
    return records


def save_qa(qa: list[QaRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in qa:
            row = {
                "id": r.id,
                "scene_id": r.scene_id,
                "split": r.split,
                "question": list(r.question),
                "answer": r.answer,
                "candidates": list(r.candidates) if r.candidates else None,
            }
            f.write(json.dumps(row) + "\n")


def load_qa(path: str | Path) -> list[QaRecord]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            row = json.loads(line)
            out.append(
                QaRecord(
                    id=row["id"],
                    scene_id=row["scene_id"],
                    split=row["split"],
                    question=tuple(row["question"]),
                    answer=row["answer"],
                    candidates=tuple(row["candidates"]) if row["candidates"] else None,
                )
            )
    return out


def save_clips(clips: np.ndarray, path: str | Path) -> None:
    """Raw little-endian float32 payload plus a JSON sidecar header."""
    path = Path(path)
    arr = np.ascontiguousarray(clips, dtype="<f4")
    path.write_bytes(arr.tobytes())
    sidecar = {"shape": list(arr.shape), "dtype": "<f4", "order": "C"}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar))


def load_clips(path: str | Path) -> np.ndarray:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    raw = np.frombuffer(path.read_bytes(), dtype=sidecar["dtype"])
    return raw.reshape(sidecar["shape"]).copy()


# ----------------------------------------------------------------------
# Batch assembly
# ----------------------------------------------------------------------


@dataclass
class RawBatch:
    """Everything the training step needs for one batch.

    ``text_specs[i]`` is None when no content word was maskable; the
    corresponding tm_valid entry is False and that row skips all masked-
    text terms.
    """

    record_ids: list[int]
    clips: torch.Tensor  # (B, F, H, W, C)
    token_ids: torch.Tensor  # (B, L)
    masked_token_ids: torch.Tensor  # (B, L)
    video_specs: list[VideoMaskSpec]
    text_specs: list[TextMaskSpec | None]
    tm_valid: torch.Tensor  # (B,) bool
    mask_positions: torch.Tensor  # (n, 2) of (row, text index)
    mask_targets: torch.Tensor  # (n,) original ids at masked positions


def make_batch(
    records: list[Record],
    vocab: Vocab,
    max_text_len: int,
    spatial_size: int,
    video_ratio: float,
    text_ratio: float,
    seed: int,
    epoch: int = 0,
    step: int = 0,
    clip_store: np.ndarray | None = None,
    dtype: torch.dtype = torch.float32,
) -> RawBatch:
    if not records:
        raise ValueError("empty batch")
    clips, token_rows, masked_rows = [], [], []
    video_specs, text_specs = [], []
    tm_valid, positions, targets = [], [], []
    for row, rec in enumerate(records):
        if clip_store is not None:
            clip = clip_store[rec.id]
        else:
            clip = render(rec.scene)
        clips.append(torch.from_numpy(np.ascontiguousarray(clip)))
        ids, tags = vocab.encode(list(rec.caption), max_text_len)
        token_rows.append(ids)
        vrng = Rng(seed, stream=(1, epoch, step, rec.id))
        video_specs.append(make_video_mask(spatial_size, video_ratio, vrng))
        trng = Rng(seed, stream=(2, epoch, step, rec.id))
        try:
            spec = make_text_mask(ids, tags, text_ratio, trng)
        except NoEligibleTokenError:
            spec = None
        text_specs.append(spec)
        tm_valid.append(spec is not None)
        if spec is not None:
            masked_rows.append(apply_text_mask(ids, spec, vocab.mask_id))
            for p, orig in zip(spec.positions, spec.replaced_ids):
                positions.append((row, p))
                targets.append(orig)
        else:
            masked_rows.append(list(ids))
    return RawBatch(
        record_ids=[r.id for r in records],
        clips=torch.stack(clips).to(dtype),
        token_ids=torch.tensor(token_rows, dtype=torch.long),
        masked_token_ids=torch.tensor(masked_rows, dtype=torch.long),
        video_specs=video_specs,
        text_specs=text_specs,
        tm_valid=torch.tensor(tm_valid, dtype=torch.bool),
        mask_positions=torch.tensor(positions, dtype=torch.long).reshape(-1, 2),
        mask_targets=torch.tensor(targets, dtype=torch.long),
    )
