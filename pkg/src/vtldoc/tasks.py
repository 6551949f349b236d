"""Prompt/target sequence construction for all training objectives."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .corpus import Document
from .geometry import BBox, LayoutQuantizer, PatchGrid, quantize_bbox, union_bbox
from .vocab import (
    LAYOUT,
    SENTINEL_CLOSE,
    SENTINEL_OPEN,
    MixedItem,
    Vocabulary,
    tokenize_text,
)

JOINT_TEXT_LAYOUT = "joint_text_layout"
LAYOUT_MODELING = "layout_modeling"
VISUAL_TEXT = "visual_text_recognition"
MASKED_IMAGE = "masked_image"

SELF_SUPERVISED_TASKS = (JOINT_TEXT_LAYOUT, LAYOUT_MODELING, VISUAL_TEXT, MASKED_IMAGE)

PROMPTS = {
    JOINT_TEXT_LAYOUT: "Joint Text-Layout Reconstruction.",
    LAYOUT_MODELING: "Layout Modeling.",
    VISUAL_TEXT: "Visual Text Recognition.",
    MASKED_IMAGE: "Masked Image Reconstruction.",
}

SUPERVISED_PROMPTS = {
    "classification": "Document Classification on {dataset}.",
    "layout_analysis": "Layout Analysis on {dataset}.",
    "information_extraction": "Information Extraction on {dataset}.",
    "qa": "Question Answering on {dataset}.",
    "nli": "Document Natural Language Inference on {dataset}.",
}

# words every vocabulary must contain so prompts never hit byte fallback
PROMPT_WORDS = sorted(
    {w for p in PROMPTS.values() for w in p.split()}
    | {w for p in SUPERVISED_PROMPTS.values() for w in p.format(dataset="D").split()}
)


class EmptyDocumentError(ValueError):
    pass


class MissingAnnotationError(KeyError):
    pass


@dataclass(frozen=True)
class TaskConfig:
    ratio_joint: float = 0.15
    ratio_layout: float = 0.75
    ratio_visual_text: float = 0.50
    ratio_image_patches: float = 0.75
    mean_span_length: int = 3
    max_input_len: int = 512
    max_target_len: int = 128
    patch: int = 16


@dataclass
class TrainingExample:
    task: str
    input_items: list[MixedItem]
    image: np.ndarray  # uint8 raster
    target_items: list[MixedItem] | None = None
    pixel_target: np.ndarray | None = None  # uint8 raster
    patch_mask: np.ndarray | None = None  # bool per patch, row-major
    doc_id: str = ""
    seed: int = 0


def example_seed(global_seed: int, doc_id: str, task: str, epoch: int = 0) -> int:
    h = hashlib.blake2b(
        f"{global_seed}/{doc_id}/{task}/{epoch}".encode(), digest_size=8
    )
    return int.from_bytes(h.digest(), "little")


def _round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


def sample_mask_spans(
    m: int, ratio: float, mean_span_length: int, rng: np.random.Generator
) -> list[tuple[int, int]]:
    """Disjoint word-index spans [start, end) totalling exactly round(ratio*m)
    words, with geometric span lengths trimmed to the budget."""
    if m < 1:
        raise EmptyDocumentError("document has no words")
    budget = _round_half_up(ratio * m)
    if budget <= 0:
        return []
    budget = min(budget, m)
    lengths: list[int] = []
    remaining = budget
    while remaining > 0:
        l = min(int(rng.geometric(1.0 / mean_span_length)), remaining)
        lengths.append(l)
        remaining -= l
    # spans are separated by at least one kept word; merge if too many spans
    while len(lengths) - 1 > m - budget:
        lengths[-2] += lengths[-1]
        lengths.pop()
    n = len(lengths)
    free = m - budget - (n - 1)
    # distribute the remaining kept words over the n+1 gaps (stars and bars)
    if free > 0:
        dividers = np.sort(rng.choice(free + n, size=n, replace=False))
        gaps = np.diff(np.concatenate([[-1], dividers, [free + n]])) - 1
    else:
        gaps = np.zeros(n + 1, dtype=int)
    spans: list[tuple[int, int]] = []
    cursor = int(gaps[0])
    for i, l in enumerate(lengths):
        spans.append((cursor, cursor + l))
        cursor += l + int(gaps[i + 1]) + (1 if i < n - 1 else 0)
    return spans


def _word_items(doc: Document, idx: int, vocab: Vocabulary) -> list[MixedItem]:
    word, box = doc.words[idx]
    return [it.with_bbox(box) for it in tokenize_text(word, vocab)]


def _layout_items(box: BBox, vocab: Vocabulary) -> list[MixedItem]:
    q = LayoutQuantizer(vocab.granularity)
    return [
        MixedItem(LAYOUT, vocab.layout_id(i), f"<{i}>") for i in quantize_bbox(box, q)
    ]


def _sentinel(vocab: Vocabulary, family: str, k: int, close: bool = False) -> MixedItem:
    sid = vocab.sentinel_id(family, k, close)
    kind = SENTINEL_CLOSE if close else SENTINEL_OPEN
    return MixedItem(kind, sid, vocab.entries[sid][0])


def _span_union(doc: Document, span: tuple[int, int]) -> BBox:
    return union_bbox([doc.words[i][1] for i in range(span[0], span[1])])


def _spans_for(
    doc: Document,
    ratio: float,
    cfg: TaskConfig,
    seed: int,
    spans: list[tuple[int, int]] | None,
) -> list[tuple[int, int]]:
    if not doc.words:
        raise EmptyDocumentError(f"document {doc.id} has no words")
    if spans is not None:
        return spans
    rng = np.random.default_rng(seed)
    return sample_mask_spans(len(doc.words), ratio, cfg.mean_span_length, rng)


def build_joint_text_layout(
    doc: Document,
    vocab: Vocabulary,
    cfg: TaskConfig,
    seed: int,
    spans: list[tuple[int, int]] | None = None,
) -> TrainingExample:
    spans = _spans_for(doc, cfg.ratio_joint, cfg, seed, spans)
    inp = tokenize_text(PROMPTS[JOINT_TEXT_LAYOUT], vocab)
    tgt: list[MixedItem] = []
    starts = {s: k for k, (s, _) in enumerate(spans)}
    masked = {i for s, e in spans for i in range(s, e)}
    for i in range(len(doc.words)):
        if i in starts:
            k = starts[i]
            s, e = spans[k]
            inp.append(_sentinel(vocab, "text_layout", k))
            tgt.append(_sentinel(vocab, "text_layout", k))
            for j in range(s, e):
                tgt.extend(_word_items(doc, j, vocab))
            tgt.extend(_layout_items(_span_union(doc, spans[k]), vocab))
        elif i not in masked:
            inp.extend(_word_items(doc, i, vocab))
    return TrainingExample(
        JOINT_TEXT_LAYOUT, inp, doc.image, target_items=tgt, doc_id=doc.id, seed=seed
    )


def build_layout_modeling(
    doc: Document,
    vocab: Vocabulary,
    cfg: TaskConfig,
    seed: int,
    spans: list[tuple[int, int]] | None = None,
) -> TrainingExample:
    spans = _spans_for(doc, cfg.ratio_layout, cfg, seed, spans)
    inp = tokenize_text(PROMPTS[LAYOUT_MODELING], vocab)
    tgt: list[MixedItem] = []
    starts = {s: k for k, (s, _) in enumerate(spans)}
    ends = {e - 1: k for k, (_, e) in enumerate(spans)}
    for i in range(len(doc.words)):
        if i in starts:
            k = starts[i]
            inp.append(_sentinel(vocab, "layout", k))
            tgt.append(_sentinel(vocab, "layout", k))
            tgt.extend(_layout_items(_span_union(doc, spans[k]), vocab))
        inp.extend(_word_items(doc, i, vocab))
        if i in ends:
            inp.append(_sentinel(vocab, "layout", ends[i], close=True))
    return TrainingExample(
        LAYOUT_MODELING, inp, doc.image, target_items=tgt, doc_id=doc.id, seed=seed
    )


def build_visual_text_recognition(
    doc: Document,
    vocab: Vocabulary,
    cfg: TaskConfig,
    seed: int,
    spans: list[tuple[int, int]] | None = None,
) -> TrainingExample:
    spans = _spans_for(doc, cfg.ratio_visual_text, cfg, seed, spans)
    inp = tokenize_text(PROMPTS[VISUAL_TEXT], vocab)
    tgt: list[MixedItem] = []
    starts = {s: k for k, (s, _) in enumerate(spans)}
    masked = {i for s, e in spans for i in range(s, e)}
    for i in range(len(doc.words)):
        if i in starts:
            k = starts[i]
            s, e = spans[k]
            inp.append(_sentinel(vocab, "text", k))
            inp.extend(_layout_items(_span_union(doc, spans[k]), vocab))
            inp.append(_sentinel(vocab, "text", k, close=True))
            tgt.append(_sentinel(vocab, "text", k))
            for j in range(s, e):
                tgt.extend(_word_items(doc, j, vocab))
        elif i not in masked:
            inp.extend(_word_items(doc, i, vocab))
    return TrainingExample(
        VISUAL_TEXT, inp, doc.image, target_items=tgt, doc_id=doc.id, seed=seed
    )


def build_masked_image(
    doc: Document,
    vocab: Vocabulary,
    cfg: TaskConfig,
    seed: int,
) -> TrainingExample:
    grid = PatchGrid(doc.height, doc.width, cfg.patch)
    rng = np.random.default_rng(seed)
    n_masked = _round_half_up(cfg.ratio_image_patches * grid.num_patches)
    mask = np.zeros(grid.num_patches, dtype=bool)
    if n_masked > 0:
        chosen = rng.choice(grid.num_patches, size=n_masked, replace=False)
        mask[chosen] = True
    inp = tokenize_text(PROMPTS[MASKED_IMAGE], vocab)
    for i in range(len(doc.words)):
        inp.extend(_word_items(doc, i, vocab))
    return TrainingExample(
        MASKED_IMAGE,
        inp,
        doc.image,
        pixel_target=doc.image.copy(),
        patch_mask=mask,
        doc_id=doc.id,
        seed=seed,
    )


def build_supervised(
    doc: Document,
    vocab: Vocabulary,
    kind: str,
    fields: dict | None = None,
) -> TrainingExample:
    fields = fields or {}
    dataset = fields.get("dataset", "Synthetic")
    labels = doc.labels

    def need(key: str):
        if key not in labels:
            raise MissingAnnotationError(f"{kind}: document {doc.id} lacks {key!r}")
        return labels[key]

    def doc_word_items() -> list[MixedItem]:
        out: list[MixedItem] = []
        for i in range(len(doc.words)):
            out.extend(_word_items(doc, i, vocab))
        return out

    if kind == "entity_tagging":
        # FUNSD-style: no prompt; target repeats each word with its tag
        tags = need("entity_tags")
        inp = doc_word_items()
        tgt: list[MixedItem] = []
        for i, (word, box) in enumerate(doc.words):
            tgt.extend(_word_items(doc, i, vocab))
            tgt.extend(
                it.with_bbox(box) for it in tokenize_text(f"[{tags[i]}]", vocab)
            )
        return TrainingExample(kind, inp, doc.image, target_items=tgt, doc_id=doc.id)

    if kind not in SUPERVISED_PROMPTS:
        raise ValueError(f"unknown supervised kind {kind!r}")
    inp = tokenize_text(SUPERVISED_PROMPTS[kind].format(dataset=dataset), vocab)

    if kind == "classification":
        inp += doc_word_items()
        tgt = tokenize_text(need("class"), vocab)
    elif kind == "layout_analysis":
        regions = need("regions")
        entity = fields.get("entity", regions[0]["name"] if regions else "")
        inp += tokenize_text(entity, vocab) + doc_word_items()
        tgt = []
        for r in regions:
            if r["name"] != entity:
                continue
            tgt.extend(tokenize_text(r["name"], vocab))
            tgt.extend(_layout_items(BBox(*r["bbox"]), vocab))
    elif kind == "information_extraction":
        query = need("query")
        inp += tokenize_text(query["text"], vocab) + doc_word_items()
        tgt = tokenize_text(query["label"], vocab)
        for box in query.get("token_boxes", []):
            tgt.extend(_layout_items(BBox(*box), vocab))
    elif kind == "qa":
        qa = need("qa")
        inp += tokenize_text(qa["question"], vocab) + doc_word_items()
        tgt = tokenize_text(qa["answer"], vocab)
    elif kind == "nli":
        nli = need("nli")
        inp += tokenize_text(nli["premise"], vocab)
        inp += tokenize_text(nli["hypothesis"], vocab)
        tgt = tokenize_text(nli["label"], vocab)
    return TrainingExample(kind, inp, doc.image, target_items=tgt, doc_id=doc.id)


# ---------------------------------------------------------------------------
# shard (de)serialization helpers, used by corpus.write_shard/read_shard

def _item_to_json(it: MixedItem) -> list:
    return [it.kind, it.id, it.surface, list(it.bbox.as_tuple()), list(it.char_span)]


def _item_from_json(row: list) -> MixedItem:
    kind, tid, surface, box, span = row
    return MixedItem(kind, tid, surface, BBox(*box), tuple(span))


def example_to_json(ex: TrainingExample, img_enc) -> dict:
    return {
        "task": ex.task,
        "doc_id": ex.doc_id,
        "seed": ex.seed,
        "input": [_item_to_json(it) for it in ex.input_items],
        "target": None
        if ex.target_items is None
        else [_item_to_json(it) for it in ex.target_items],
        "image": img_enc(ex.image),
        "pixel_target": None if ex.pixel_target is None else img_enc(ex.pixel_target),
        "patch_mask": None if ex.patch_mask is None else ex.patch_mask.astype(int).tolist(),
    }


def example_from_json(obj: dict, img_dec) -> TrainingExample:
    return TrainingExample(
        task=obj["task"],
        input_items=[_item_from_json(r) for r in obj["input"]],
        image=img_dec(obj["image"]),
        target_items=None
        if obj["target"] is None
        else [_item_from_json(r) for r in obj["target"]],
        pixel_target=None
        if obj["pixel_target"] is None
        else img_dec(obj["pixel_target"]),
        patch_mask=None
        if obj["patch_mask"] is None
        else np.array(obj["patch_mask"], dtype=bool),
        doc_id=obj["doc_id"],
        seed=obj["seed"],
    )
