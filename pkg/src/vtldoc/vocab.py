"""Unified vocabulary over text words, sentinels, layout tokens, and specials.

The id space is one dense array: text entries first, then the three special
tokens, then the sentinel families, then layout tokens <0>..<V>, then the
256 byte-fallback entries. Serialization is the ordered array itself, so
array order defines ids bit-exactly.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field, replace

from .geometry import NULL_BBOX, BBox, LayoutQuantizer, dequantize_bbox

# item kinds
TEXT = "text"
SENTINEL_OPEN = "sentinel_open"
SENTINEL_CLOSE = "sentinel_close"
LAYOUT = "layout"
SPECIAL = "special"

# id families (disjoint ranges of the id space)
FAM_TEXT = "text"
FAM_SPECIAL = "special"
FAM_SENTINEL = "sentinel"
FAM_LAYOUT = "layout"
FAM_BYTE = "byte"

PAD = "<pad>"
EOS = "</s>"
UNK = "<unk>"

# sentinel sub-families, in id order
_SENTINEL_SPECS = [
    ("text_layout", False),  # <text_layout_k>
    ("layout", False),       # <layout_k>
    ("layout", True),        # </layout_k>
    ("text", False),         # <text_k>
    ("text", True),          # </text_k>
]


class DecodeError(ValueError):
    pass


class MalformedLayoutError(ValueError):
    pass


class MalformedSentinelError(ValueError):
    pass


def sentinel_surface(family: str, k: int, close: bool = False) -> str:
    return f"</{family}_{k}>" if close else f"<{family}_{k}>"


@dataclass(frozen=True)
class MixedItem:
    """One element of a mixed text/sentinel/layout/special sequence."""

    kind: str
    id: int
    surface: str
    bbox: BBox = NULL_BBOX
    # character span within the source word (used by the vision decoder's
    # character cross-attention); (0, len(surface)) unless byte fallback
    char_span: tuple[int, int] = (0, 0)

    def with_bbox(self, bbox: BBox) -> "MixedItem":
        return replace(self, bbox=bbox)


@dataclass
class ParsedGroup:
    """One sentinel-delimited block of a generated sequence."""

    sentinel: int | None  # k, or None for content outside any sentinel
    family: str | None    # "text_layout" | "layout" | "text" | None
    text: str = ""
    bboxes: list[BBox] = field(default_factory=list)


class Vocabulary:
    def __init__(self, entries: list[tuple[str, str]]):
        self.entries = entries
        self._text_ids: dict[str, int] = {}
        self._sentinel_info: dict[int, tuple[str, int, bool]] = {}
        self._sentinel_ids: dict[tuple[str, int, bool], int] = {}
        self._layout_base: int | None = None
        self._byte_base: int | None = None
        self._special_ids: dict[str, int] = {}
        self.granularity = 0
        self.sentinel_count = 0
        for i, (surface, fam) in enumerate(entries):
            if fam == FAM_TEXT:
                self._text_ids[surface] = i
            elif fam == FAM_SPECIAL:
                self._special_ids[surface] = i
            elif fam == FAM_SENTINEL:
                close = surface.startswith("</")
                name, _, k = surface.strip("<>/").rpartition("_")
                key = (name, int(k), close)
                self._sentinel_info[i] = key
                self._sentinel_ids[key] = i
                self.sentinel_count = max(self.sentinel_count, int(k) + 1)
            elif fam == FAM_LAYOUT:
                if self._layout_base is None:
                    self._layout_base = i
                self.granularity = max(self.granularity, int(surface.strip("<>")))
            elif fam == FAM_BYTE:
                if self._byte_base is None:
                    self._byte_base = i
            else:
                raise ValueError(f"unknown family {fam!r}")
        self.pad_id = self._special_ids[PAD]
        self.eos_id = self._special_ids[EOS]
        self.unk_id = self._special_ids[UNK]

    def __len__(self) -> int:
        return len(self.entries)

    def family_of(self, token_id: int) -> str:
        if not (0 <= token_id < len(self.entries)):
            raise DecodeError(f"id {token_id} out of range")
        return self.entries[token_id][1]

    def text_id(self, word: str) -> int | None:
        return self._text_ids.get(word)

    def byte_id(self, b: int) -> int:
        return self._byte_base + b

    def layout_id(self, index: int) -> int:
        if not (0 <= index <= self.granularity):
            raise ValueError(f"layout index {index} outside [0, {self.granularity}]")
        return self._layout_base + index

    def layout_index(self, token_id: int) -> int:
        return token_id - self._layout_base

    def sentinel_id(self, family: str, k: int, close: bool = False) -> int:
        return self._sentinel_ids[(family, k, close)]

    def sentinel_info(self, token_id: int) -> tuple[str, int, bool]:
        return self._sentinel_info[token_id]

    def item(self, token_id: int) -> MixedItem:
        """Reconstruct a MixedItem from an id alone (null bbox)."""
        fam = self.family_of(token_id)
        surface = self.entries[token_id][0]
        if fam == FAM_TEXT:
            return MixedItem(TEXT, token_id, surface, char_span=(0, len(surface)))
        if fam == FAM_BYTE:
            ch = chr(token_id - self._byte_base)
            return MixedItem(TEXT, token_id, ch, char_span=(0, 1))
        if fam == FAM_SENTINEL:
            _, _, close = self._sentinel_info[token_id]
            kind = SENTINEL_CLOSE if close else SENTINEL_OPEN
            return MixedItem(kind, token_id, surface)
        if fam == FAM_LAYOUT:
            return MixedItem(LAYOUT, token_id, surface)
        return MixedItem(SPECIAL, token_id, surface)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.entries, f, ensure_ascii=False)

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            return cls([tuple(e) for e in json.load(f)])


def build_vocab(
    words: list[str],
    sentinel_count: int = 128,
    granularity: int = 500,
    max_text_entries: int = 4096,
) -> Vocabulary:
    """Frequency word vocabulary with byte fallback; fully deterministic."""
    if not words:
        raise ValueError("empty corpus word list")
    counts = Counter(words)
    ranked = sorted(counts, key=lambda w: (-counts[w], w))[:max_text_entries]
    entries: list[tuple[str, str]] = [(w, FAM_TEXT) for w in ranked]
    entries += [(PAD, FAM_SPECIAL), (EOS, FAM_SPECIAL), (UNK, FAM_SPECIAL)]
    for k in range(sentinel_count):
        for fam, close in _SENTINEL_SPECS:
            entries.append((sentinel_surface(fam, k, close), FAM_SENTINEL))
    for v in range(granularity + 1):
        entries.append((f"<{v}>", FAM_LAYOUT))
    for b in range(256):
        entries.append((f"<byte{b}>", FAM_BYTE))
    return Vocabulary(entries)


def tokenize_text(s: str, vocab: Vocabulary) -> list[MixedItem]:
    """Whitespace-split; out-of-vocabulary words fall back to one item per byte."""
    items: list[MixedItem] = []
    for word in s.split():
        tid = vocab.text_id(word)
        if tid is not None:
            items.append(MixedItem(TEXT, tid, word, char_span=(0, len(word))))
        else:
            for i, b in enumerate(word.encode("utf-8")):
                items.append(
                    MixedItem(TEXT, vocab.byte_id(b), chr(b), char_span=(i, i + 1))
                )
    return items


def encode_mixed(items: list[MixedItem]) -> list[int]:
    return [it.id for it in items]


def decode_mixed(ids: list[int], vocab: Vocabulary) -> list[MixedItem]:
    return [vocab.item(i) for i in ids]


def detokenize(items: list[MixedItem], vocab: Vocabulary) -> str:
    """Single-space join; byte-fallback continuations (char_span start > 0)
    reattach to their word, and consecutive layout tokens print adjacent
    (<100><350>...)."""
    parts: list[str] = []
    prev_fam = None
    for it in items:
        fam = vocab.family_of(it.id)
        merge = (fam == FAM_LAYOUT and prev_fam == FAM_LAYOUT) or (
            fam == FAM_BYTE and prev_fam == FAM_BYTE and it.char_span[0] > 0
        )
        if parts and merge:
            parts[-1] += it.surface
        else:
            parts.append(it.surface)
        prev_fam = fam
    return " ".join(parts)


def parse_layout_groups(
    ids: list[int], vocab: Vocabulary, q: LayoutQuantizer
) -> list[ParsedGroup]:
    """Split a generated sequence at sentinels into (text, bboxes) groups.

    Consecutive layout tokens must come in runs whose length is a multiple
    of 4; each 4-run dequantizes to one box. Content before the first
    sentinel (or after a close) lands in an unlabeled group.
    """
    groups: list[ParsedGroup] = []
    current = ParsedGroup(sentinel=None, family=None)
    text_parts: list[str] = []
    layout_run: list[int] = []
    prev_was_byte_cont = False

    def flush_layout():
        nonlocal layout_run
        if not layout_run:
            return
        if len(layout_run) % 4:
            where = f"<{current.family}_{current.sentinel}>" if current.family else "start"
            raise MalformedLayoutError(
                f"layout run of length {len(layout_run)} in group {where}"
            )
        for j in range(0, len(layout_run), 4):
            current.bboxes.append(dequantize_bbox(tuple(layout_run[j : j + 4]), q))
        layout_run = []

    def flush_group():
        nonlocal current, text_parts
        flush_layout()
        current.text = " ".join(text_parts)
        if current.sentinel is not None or current.text or current.bboxes:
            groups.append(current)
        text_parts = []

    for tid in ids:
        fam = vocab.family_of(tid)
        if fam == FAM_LAYOUT:
            layout_run.append(vocab.layout_index(tid))
            prev_was_byte_cont = False
            continue
        flush_layout()
        if fam in (FAM_TEXT, FAM_BYTE):
            it = vocab.item(tid)
            # ids alone cannot carry word boundaries, so consecutive byte
            # tokens read back as one out-of-vocabulary word
            if fam == FAM_BYTE and prev_was_byte_cont and text_parts:
                text_parts[-1] += it.surface
            else:
                text_parts.append(it.surface)
            prev_was_byte_cont = fam == FAM_BYTE
            continue
        prev_was_byte_cont = False
        if fam == FAM_SPECIAL:
            if tid == vocab.eos_id:
                break
            continue
        # sentinel
        name, k, close = vocab.sentinel_info(tid)
        if close:
            if current.family != name or current.sentinel != k:
                raise MalformedSentinelError(
                    f"close {sentinel_surface(name, k, True)} without matching open"
                )
            flush_group()
            current = ParsedGroup(sentinel=None, family=None)
        else:
            flush_group()
            current = ParsedGroup(sentinel=k, family=name)
    flush_group()
    return groups
