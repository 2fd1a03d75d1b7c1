"""Masked-sample construction: video block masks and semantic text masks.

Video masking picks spatial patch positions (the same positions in every
frame) and marks them for replacement with a learnable mask token.  Text
masking targets content words only: nouns, verbs, and adjectives, never
auxiliaries, [CLS] or [PAD].  POS tags come from a deterministic
lexicon-plus-suffix tagger that fully covers the synthetic corpus
vocabulary.
"""

from __future__ import annotations

import importlib.resources
import math
from dataclasses import dataclass

from .substrate import Rng

NOUN = "NOUN"
VERB = "VERB"
ADJ = "ADJ"
AUX = "AUX"
OTHER = "OTHER"
SPECIAL = "SPECIAL"

CONTENT_TAGS = frozenset({NOUN, VERB, ADJ})

# Auxiliary verbs are never masked, whatever the lexicon or suffix rules say.
AUX_WORDS = frozenset(
    "be am is are was were been have has had do does did "
    "will would shall should can could may might must".split()
)

_SUFFIX_RULES = (
    ("ing", VERB),
    ("ed", VERB),
    ("ly", OTHER),
    ("ous", ADJ),
    ("ful", ADJ),
    ("ive", ADJ),
)


class MaskingError(ValueError):
    pass


class DegenerateMaskError(MaskingError):
    """Requested video mask rounds to zero positions."""


class NoEligibleTokenError(MaskingError):
    """Text has no maskable content word."""


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def load_lexicon(path=None) -> dict[str, str]:
    """word -> tag map; ``path`` overrides the packaged lexicon file."""
    if path is None:
        text = importlib.resources.files("trialign").joinpath("lexicon.txt").read_text()
    else:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    lex = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        word, tag = line.split("\t")
        lex[word] = tag
    return lex


_DEFAULT_LEXICON = load_lexicon()


def pos_tag(words: list[str], lexicon: dict[str, str] | None = None) -> list[str]:
    """Tag each lowercase word; AUX stoplist wins, then lexicon, then suffixes."""
    lex = _DEFAULT_LEXICON if lexicon is None else lexicon
    tags = []
    for w in words:
        if w in AUX_WORDS:
            tags.append(AUX)
            continue
        if w in lex:
            tags.append(lex[w])
            continue
        for suffix, tag in _SUFFIX_RULES:
            if len(w) > len(suffix) + 1 and w.endswith(suffix):
                tags.append(tag)
                break
        else:
            tags.append(OTHER)
    return tags


@dataclass(frozen=True)
class VideoMaskSpec:
    """Spatial patch positions masked in every frame of a clip."""

    spatial_indices: tuple[int, ...]
    spatial_size: int
    ratio: float

    def patch_indices(self, frames: int) -> list[int]:
        """Flat patch indices over the whole clip (frame-major layout)."""
        return [
            f * self.spatial_size + s
            for f in range(frames)
            for s in self.spatial_indices
        ]


@dataclass(frozen=True)
class TextMaskSpec:
    positions: tuple[int, ...]
    replaced_ids: tuple[int, ...]


def _grid_side(s: int) -> int | None:
    side = round(math.isqrt(s))
    return side if side * side == s else None


def make_video_mask(spatial_size: int, ratio: float, rng: Rng) -> VideoMaskSpec:
    """Sample the masked spatial positions for one clip.

    Exactly ``round(ratio * spatial_size)`` positions are chosen.  On a
    square grid they are grown as contiguous rectangular blocks; otherwise
    they are uniform draws.  Applying the same positions to every frame
    keeps the masked fraction identical per frame.
    """
    if not (0.0 < ratio < 1.0):
        raise MaskingError(f"ratio must be in (0,1), got {ratio}")
    if spatial_size < 1:
        raise MaskingError("spatial_size must be >= 1")
    count = round_half_away(ratio * spatial_size)
    if count == 0:
        raise DegenerateMaskError(
            f"ratio {ratio} over {spatial_size} positions rounds to zero"
        )

    side = _grid_side(spatial_size)
    if side is None or side < 2:
        idx = rng.choice(spatial_size, size=count, replace=False)
        chosen = sorted(int(i) for i in idx)
        return VideoMaskSpec(tuple(chosen), spatial_size, ratio)

    chosen: set[int] = set()
    while len(chosen) < count:
        bh = int(rng.integers(1, side + 1))
        bw = int(rng.integers(1, side + 1))
        r0 = int(rng.integers(0, side - bh + 1))
        c0 = int(rng.integers(0, side - bw + 1))
        cells = [
            (r0 + dr) * side + (c0 + dc) for dr in range(bh) for dc in range(bw)
        ]
        order = rng.permutation(len(cells))
        for k in order:
            if len(chosen) >= count:
                break
            chosen.add(cells[int(k)])
    return VideoMaskSpec(tuple(sorted(chosen)), spatial_size, ratio)


def eligible_positions(tags: list[str]) -> list[int]:
    return [i for i, t in enumerate(tags) if t in CONTENT_TAGS]


def make_text_mask(
    token_ids: list[int],
    tags: list[str],
    ratio: float,
    rng: Rng,
) -> TextMaskSpec:
    """Choose masked positions among content words.

    ``tags`` aligns with ``token_ids`` (index 0 is [CLS], tagged SPECIAL).
    Masks ``round(ratio * |eligible|)`` positions, at least one when any
    content word exists.
    """
    if not (0.0 < ratio < 1.0):
        raise MaskingError(f"ratio must be in (0,1), got {ratio}")
    if len(tags) != len(token_ids):
        raise MaskingError("tags and token_ids must align")
    eligible = eligible_positions(tags)
    if not eligible:
        raise NoEligibleTokenError("no NOUN/VERB/ADJ token to mask")
    count = max(1, round_half_away(ratio * len(eligible)))
    picked = rng.choice(len(eligible), size=count, replace=False)
    positions = tuple(sorted(eligible[int(i)] for i in picked))
    replaced = tuple(token_ids[p] for p in positions)
    return TextMaskSpec(positions, replaced)


def apply_text_mask(token_ids: list[int], spec: TextMaskSpec, mask_id: int) -> list[int]:
    """Copy of ``token_ids`` with [MASK] at the spec positions."""
    out = list(token_ids)
    for p in spec.positions:
        if not (0 <= p < len(out)):
            raise MaskingError(f"mask position {p} out of range for length {len(out)}")
        out[p] = mask_id
    return out


def restore_text(token_ids: list[int], spec: TextMaskSpec) -> list[int]:
    out = list(token_ids)
    for p, orig in zip(spec.positions, spec.replaced_ids):
        out[p] = orig
    return out
