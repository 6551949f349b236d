"""Document data model, OCR-JSON ingestion, synthetic rendering, and shards.

Images are stored as 8-bit grayscale (0..255) end to end; the model divides
by 255 at embedding time. Rasterization uses integer arithmetic only, so
renders are bit-identical across platforms.
"""

from __future__ import annotations

import base64
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import BBox, InvalidBBoxError

SHARD_VERSION = 1

INK = 255


class SchemaError(ValueError):
    pass


class LayoutOverflowError(ValueError):
    pass


class CorruptShardError(ValueError):
    pass


class ShardVersionError(CorruptShardError):
    pass


@dataclass
class Document:
    """One OCR'd page: raster, ordered words with boxes, optional labels."""

    id: str
    image: np.ndarray  # uint8, H x W
    words: list[tuple[str, BBox]]
    labels: dict = field(default_factory=dict)
    synthetic: bool = False  # re-renderable from words at any resolution

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def image_float(self) -> np.ndarray:
        return self.image.astype(np.float64) / 255.0

    def text(self) -> str:
        return " ".join(w for w, _ in self.words)


# ---------------------------------------------------------------------------
# glyphs: 5 rows x 3 cols binary patterns for common printable ASCII;
# anything else gets a pattern derived from a fixed integer hash of the byte.

_GLYPHS = {
    "A": "010 101 111 101 101", "B": "110 101 110 101 110",
    "C": "011 100 100 100 011", "D": "110 101 101 101 110",
    "E": "111 100 110 100 111", "F": "111 100 110 100 100",
    "G": "011 100 101 101 011", "H": "101 101 111 101 101",
    "I": "111 010 010 010 111", "J": "001 001 001 101 010",
    "K": "101 110 100 110 101", "L": "100 100 100 100 111",
    "M": "101 111 111 101 101", "N": "101 111 111 111 101",
    "O": "010 101 101 101 010", "P": "110 101 110 100 100",
    "Q": "010 101 101 011 001", "R": "110 101 110 110 101",
    "S": "011 100 010 001 110", "T": "111 010 010 010 010",
    "U": "101 101 101 101 111", "V": "101 101 101 101 010",
    "W": "101 101 111 111 101", "X": "101 101 010 101 101",
    "Y": "101 101 010 010 010", "Z": "111 001 010 100 111",
    "0": "111 101 101 101 111", "1": "010 110 010 010 111",
    "2": "110 001 010 100 111", "3": "110 001 010 001 110",
    "4": "101 101 111 001 001", "5": "111 100 110 001 110",
    "6": "011 100 111 101 111", "7": "111 001 010 010 010",
    "8": "111 101 111 101 111", "9": "111 101 111 001 110",
    ".": "000 000 000 000 010", ",": "000 000 000 010 100",
    ":": "000 010 000 010 000", "-": "000 000 111 000 000",
    "?": "110 001 010 000 010", "!": "010 010 010 000 010",
    "/": "001 001 010 100 100", "(": "001 010 010 010 001",
    ")": "100 010 010 010 100",
}
for _c in "abcdefghijklmnopqrstuvwxyz":
    _GLYPHS[_c] = _GLYPHS[_c.upper()]


def _glyph_bits(ch: str) -> list[int]:
    pat = _GLYPHS.get(ch)
    if pat is not None:
        return [int(b) for b in pat.replace(" ", "")]
    # fixed multiplicative hash; stable across runs and platforms
    h = (ord(ch) * 2654435761 + 0x9E3779B9) % (1 << 32)
    return [(h >> i) & 1 for i in range(15)]


def _draw_char(img: np.ndarray, ch: str, x0: int, y0: int, w: int, h: int) -> None:
    if w <= 0 or h <= 0:
        return
    bits = _glyph_bits(ch)
    for py in range(h):
        row = py * 5 // h
        for px in range(w):
            col = px * 3 // w
            if bits[row * 3 + col]:
                img[y0 + py, x0 + px] = INK


def render_document(
    doc_id: str,
    words: list[tuple[str, BBox]],
    height: int,
    width: int,
    labels: dict | None = None,
) -> Document:
    """Rasterize each word's characters into its bbox; background 0, ink 255."""
    img = np.zeros((height, width), dtype=np.uint8)
    for word, box in words:
        box.validate()
        x0, x1 = round(box.x1 * width), round(box.x2 * width)
        y0, y1 = round(box.y1 * height), round(box.y2 * height)
        if x1 > width or y1 > height:
            raise LayoutOverflowError(f"word {word!r} overflows the page")
        n = len(word)
        if n == 0 or x1 <= x0 or y1 <= y0:
            continue
        for i, ch in enumerate(word):
            cx0 = x0 + (x1 - x0) * i // n
            cx1 = x0 + (x1 - x0) * (i + 1) // n
            _draw_char(img, ch, cx0, y0, cx1 - cx0, y1 - y0)
    return Document(
        id=doc_id, image=img, words=list(words), labels=labels or {}, synthetic=True
    )


_LEXICON = (
    "Ship Date to Retail: Week of March 14, 1994 Invoice Total Amount Due "
    "Memo Report Form Order Number Name Address City State Zip Phone Fax "
    "Letter Email Page Item Quantity Price Tax Subtotal Paid Balance Account "
    "From Subject Dear Sincerely Attached Please Review Approved Denied"
).split()

_CLASSES = ["Memo", "Letter", "Form", "Invoice", "Report", "Email"]
_TAGS = ["I-Header", "I-Question", "I-Answer", "O"]


def synth_document(seed: int, index: int, height: int, width: int) -> Document:
    """Deterministic random document: a few lines of lexicon words plus labels
    for every supervised task kind."""
    rng = np.random.default_rng([seed, index])
    n_lines = int(rng.integers(2, 5))
    words: list[tuple[str, BBox]] = []
    line_h = 0.8 / n_lines
    for li in range(n_lines):
        n_w = int(rng.integers(2, 5))
        y1 = 0.1 + li * line_h
        y2 = y1 + line_h * 0.6
        x = 0.05
        for _ in range(n_w):
            w = _LEXICON[int(rng.integers(len(_LEXICON)))]
            width_frac = min(0.04 * len(w) + 0.02, 0.9 - x)
            if width_frac <= 0.01:
                break
            words.append((w, BBox(x, y1, x + width_frac, y2)))
            x += width_frac + 0.02
    if not words:
        words = [("Memo", BBox(0.1, 0.1, 0.4, 0.2))]
    cls = _CLASSES[int(rng.integers(len(_CLASSES)))]
    qa_idx = int(rng.integers(len(words)))
    tags = [_TAGS[int(rng.integers(len(_TAGS)))] for _ in words]
    labels = {
        "class": cls,
        "qa": {"question": "What is the first word?", "answer": words[0][0]},
        "entity_tags": tags,
        "nli": {
            "premise": " ".join(w for w, _ in words[:2]),
            "hypothesis": words[0][0],
            "label": "Entailment" if int(rng.integers(2)) else "Not Entailment",
        },
        "regions": [
            {
                "name": "Paragraph",
                "bbox": list(words[qa_idx][1].as_tuple()),
            }
        ],
        "query": {"text": words[0][0], "label": "Header"},
    }
    return render_document(f"synth-{seed}-{index}", words, height, width, labels=labels)


def resize_area(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Area-average resize for integer scale factors (up or down), per axis."""
    h, w = img.shape
    out = img.astype(np.float64)
    if height <= h:
        if h % height:
            raise ValueError(f"cannot resize {h} -> {height} (non-integer factor)")
        out = out.reshape(height, h // height, -1).mean(axis=1)
    else:
        if height % h:
            raise ValueError(f"cannot resize {h} -> {height} (non-integer factor)")
        out = np.repeat(out, height // h, axis=0)
    out = out.reshape(height, -1)
    if width <= w:
        if w % width:
            raise ValueError(f"cannot resize {w} -> {width} (non-integer factor)")
        out = out.reshape(height, width, w // width).mean(axis=2)
    else:
        if width % w:
            raise ValueError(f"cannot resize {w} -> {width} (non-integer factor)")
        out = np.repeat(out, width // w, axis=1)
    return np.round(out).astype(np.uint8)


def at_resolution(doc: Document, height: int, width: int) -> Document:
    """Bring a document to the given raster size; synthetic docs re-render."""
    if doc.height == height and doc.width == width:
        return doc
    if doc.synthetic:
        return render_document(doc.id, doc.words, height, width, labels=doc.labels)
    return Document(
        id=doc.id,
        image=resize_area(doc.image, height, width),
        words=doc.words,
        labels=doc.labels,
    )


# ---------------------------------------------------------------------------
# OCR JSON ingestion

def load_ocr_document(data: bytes | str, base_dir: str = ".") -> Document:
    """Parse one OCR JSON document; boxes validated, never silently repaired."""
    try:
        obj = json.loads(data)
    except json.JSONDecodeError as e:
        raise SchemaError(f"not valid JSON: {e}") from e
    for key in ("id", "image", "words"):
        if key not in obj:
            raise SchemaError(f"missing required field {key!r}")
    img_info = obj["image"]
    for key in ("width", "height"):
        if key not in img_info:
            raise SchemaError(f"image missing required field {key!r}")
    words: list[tuple[str, BBox]] = []
    for i, w in enumerate(obj["words"]):
        if "text" not in w or "bbox" not in w:
            raise SchemaError(f"word {i}: missing text or bbox")
        try:
            box = BBox(*[float(c) for c in w["bbox"]]).validate()
        except (InvalidBBoxError, TypeError) as e:
            raise SchemaError(f"word {i} ({w.get('text')!r}): {e}") from e
        words.append((str(w["text"]), box))
    h, wd = int(img_info["height"]), int(img_info["width"])
    if img_info.get("pixels_path"):
        img = read_pgm(os.path.join(base_dir, img_info["pixels_path"]))
        if img.shape != (h, wd):
            raise SchemaError(
                f"pixel file is {img.shape}, header says {(h, wd)}"
            )
    else:
        img = np.zeros((h, wd), dtype=np.uint8)
    return Document(
        id=str(obj["id"]), image=img, words=words, labels=obj.get("labels") or {}
    )


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise SchemaError(f"{path}: not a P5 PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise SchemaError(f"{path}: only maxval 255 supported")
    pos += 1
    pixels = np.frombuffer(data[pos : pos + w * h], dtype=np.uint8)
    if pixels.size != w * h:
        raise SchemaError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w).copy()


def write_pgm(path: str, img: np.ndarray) -> None:
    h, w = img.shape
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# document store: docs.jsonl (OCR JSON lines) + one PGM per document

def write_docs(docs: list[Document], out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for doc in sorted(docs, key=lambda d: d.id):
        pgm = f"{doc.id}.pgm"
        write_pgm(os.path.join(out_dir, pgm), doc.image)
        rows.append(
            {
                "id": doc.id,
                "image": {"width": doc.width, "height": doc.height, "pixels_path": pgm},
                "words": [
                    {"text": w, "bbox": list(b.as_tuple())} for w, b in doc.words
                ],
                "labels": doc.labels or None,
                "synthetic": doc.synthetic,
            }
        )
    tmp = os.path.join(out_dir, "docs.jsonl.tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")
    os.replace(tmp, os.path.join(out_dir, "docs.jsonl"))


def read_docs(in_dir: str) -> list[Document]:
    path = os.path.join(in_dir, "docs.jsonl")
    docs = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            doc = load_ocr_document(line, base_dir=in_dir)
            doc.synthetic = bool(json.loads(line).get("synthetic"))
            docs.append(doc)
    return docs


# ---------------------------------------------------------------------------
# shards: one JSON header line, then one JSON line per TrainingExample

def _b64_image(img: np.ndarray) -> dict:
    return {
        "h": int(img.shape[0]),
        "w": int(img.shape[1]),
        "data": base64.b64encode(
            np.ascontiguousarray(img, dtype=np.uint8).tobytes()
        ).decode("ascii"),
    }


def _unb64_image(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype=np.uint8).reshape(obj["h"], obj["w"]).copy()


def write_shard(examples: list, path: str, fingerprint: str = "") -> None:
    from .tasks import example_to_json

    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        header = {
            "format_version": SHARD_VERSION,
            "count": len(examples),
            "config_fingerprint": fingerprint,
        }
        f.write(json.dumps(header) + "\n")
        for ex in examples:
            f.write(json.dumps(example_to_json(ex, _b64_image)) + "\n")
    os.replace(tmp, path)


def read_shard(path: str) -> list:
    from .tasks import example_from_json

    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise CorruptShardError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise CorruptShardError(f"{path}: bad header: {e}") from e
    if header.get("format_version") != SHARD_VERSION:
        raise ShardVersionError(
            f"{path}: version {header.get('format_version')} != {SHARD_VERSION}"
        )
    if header.get("count") != len(lines) - 1:
        raise CorruptShardError(
            f"{path}: header count {header.get('count')} but {len(lines) - 1} records"
        )
    out = []
    for i, line in enumerate(lines[1:]):
        try:
            out.append(example_from_json(json.loads(line), _unb64_image))
        except (json.JSONDecodeError, KeyError, ValueError) as e:
            raise CorruptShardError(f"{path}: record {i}: {e}") from e
    return out
