"""The vision-text-layout transformer: fusion, encoder with 2D relative
bias, text-layout decoder, and the character-conditioned vision decoder."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .geometry import PatchGrid, patch_index_of
from .tasks import MASKED_IMAGE, TrainingExample
from .vocab import TEXT, MixedItem, Vocabulary

NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    enc_layers: int = 2
    dec_layers: int = 2
    vis_dec_layers: int = 1
    heads: int = 4
    head_dim: int = 16
    ffn_dim: int = 128
    patch: int = 16
    channels: int = 1
    vocab_size: int = 0
    char_vocab: int = 256
    bias_buckets: int = 16
    max_rel_distance: int = 64
    max_target_len: int = 128

    def __post_init__(self):
        if self.d_model != self.heads * self.head_dim:
            raise ValueError("d_model must equal heads * head_dim")

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    p: dict[str, Tensor] = {}

    def w(name, *shape, std=0.02):
        p[name] = ag.param(rng.normal(0.0, std, shape))

    def ones(name, n):
        p[name] = ag.param(np.ones(n))

    d, f = cfg.d_model, cfg.ffn_dim
    w("tok_emb", cfg.vocab_size, d)
    w("patch_proj_w", cfg.patch_dim, d)
    p["patch_proj_b"] = ag.param(np.zeros(d))
    w("enc_bias_x", cfg.bias_buckets, cfg.heads)
    w("enc_bias_y", cfg.bias_buckets, cfg.heads)
    p["enc_bias_null"] = ag.param(np.zeros(cfg.heads))
    w("dec_bias_1d", cfg.bias_buckets, cfg.heads)
    for i in range(cfg.enc_layers):
        for nm in ("wq", "wk", "wv", "wo"):
            w(f"enc{i}.attn.{nm}", d, d)
        w(f"enc{i}.ffn.w1", d, f)
        w(f"enc{i}.ffn.w2", f, d)
        ones(f"enc{i}.attn_norm", d)
        ones(f"enc{i}.ffn_norm", d)
    ones("enc_final_norm", d)
    for i in range(cfg.dec_layers):
        for nm in ("wq", "wk", "wv", "wo"):
            w(f"dec{i}.self.{nm}", d, d)
            w(f"dec{i}.cross.{nm}", d, d)
        w(f"dec{i}.ffn.w1", d, f)
        w(f"dec{i}.ffn.w2", f, d)
        ones(f"dec{i}.self_norm", d)
        ones(f"dec{i}.cross_norm", d)
        ones(f"dec{i}.ffn_norm", d)
    ones("dec_final_norm", d)
    w("char_emb", cfg.char_vocab, d)
    w("vis_placeholder", 2, d)  # row 0: unmasked, row 1: masked
    for i in range(cfg.vis_dec_layers):
        for nm in ("wq", "wk", "wv", "wo"):
            w(f"vis{i}.self.{nm}", d, d)
            w(f"vis{i}.cross.{nm}", d, d)
        w(f"vis{i}.ffn.w1", d, f)
        w(f"vis{i}.ffn.w2", f, d)
        ones(f"vis{i}.self_norm", d)
        ones(f"vis{i}.cross_norm", d)
        ones(f"vis{i}.ffn_norm", d)
    ones("vis_final_norm", d)
    w("vis_out_w", d, cfg.patch_dim)
    p["vis_out_b"] = ag.param(np.zeros(cfg.patch_dim))
    return p


# ---------------------------------------------------------------------------
# relative position buckets (log-spaced signed bucketing)

def relative_position_bucket(
    rel: np.ndarray, bidirectional: bool, num_buckets: int, max_distance: int
) -> np.ndarray:
    ret = np.zeros_like(rel)
    n = -rel
    if bidirectional:
        num_buckets //= 2
        ret = ret + (n < 0).astype(np.int64) * num_buckets
        n = np.abs(n)
    else:
        n = np.maximum(n, 0)
    max_exact = num_buckets // 2
    is_small = n < max_exact
    with np.errstate(divide="ignore", invalid="ignore"):
        val_large = max_exact + (
            np.log(np.maximum(n, 1) / max_exact)
            / math.log(max_distance / max_exact)
            * (num_buckets - max_exact)
        ).astype(np.int64)
    val_large = np.minimum(val_large, num_buckets - 1)
    return ret + np.where(is_small, n, val_large)


def relative_bias_2d(
    rows: np.ndarray, cols: np.ndarray, params: dict, cfg: ModelConfig
) -> Tensor:
    """Per-head additive bias for self-attention over grid cells.

    rows/cols use -1 for the pseudo cell of no-location items; any pair
    involving it gets a dedicated learned scalar per head instead.
    """
    null = rows < 0
    d_col = cols[None, :] - cols[:, None]
    d_row = rows[None, :] - rows[:, None]
    bx = relative_position_bucket(d_col, True, cfg.bias_buckets, cfg.max_rel_distance)
    by = relative_position_bucket(d_row, True, cfg.bias_buckets, cfg.max_rel_distance)
    nullpair = (null[:, None] | null[None, :]).astype(np.float64)[:, :, None]
    core = ag.add(ag.take(params["enc_bias_x"], bx), ag.take(params["enc_bias_y"], by))
    core = ag.mul(core, ag.const(1.0 - nullpair))
    core = ag.add(core, ag.mul(params["enc_bias_null"], ag.const(nullpair)))
    return ag.transpose(core, (2, 0, 1))  # (heads, L, L)


def relative_bias_1d(length: int, params: dict, cfg: ModelConfig) -> Tensor:
    pos = np.arange(length)
    rel = pos[None, :] - pos[:, None]
    b = relative_position_bucket(rel, False, cfg.bias_buckets, cfg.max_rel_distance)
    return ag.transpose(ag.take(params["dec_bias_1d"], b), (2, 0, 1))


# ---------------------------------------------------------------------------
# attention and blocks

def _attend(
    xq: Tensor,
    xkv: Tensor,
    params: dict,
    prefix: str,
    cfg: ModelConfig,
    bias: Tensor | None = None,
    mask: np.ndarray | None = None,
) -> Tensor:
    h, hd = cfg.heads, cfg.head_dim

    def heads_of(x, wname):
        y = ag.matmul(x, params[f"{prefix}.{wname}"])
        return ag.transpose(ag.reshape(y, (y.shape[0], h, hd)), (1, 0, 2))

    q = heads_of(xq, "wq")
    k = heads_of(xkv, "wk")
    v = heads_of(xkv, "wv")
    scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(hd))
    if bias is not None:
        scores = ag.add(scores, bias)
    if mask is not None:
        scores = ag.add_const(scores, mask)
    out = ag.matmul(ag.softmax(scores), v)
    out = ag.reshape(ag.transpose(out, (1, 0, 2)), (xq.shape[0], cfg.d_model))
    return ag.matmul(out, params[f"{prefix}.wo"])


def _ffn(x: Tensor, params: dict, prefix: str) -> Tensor:
    return ag.matmul(ag.gelu(ag.matmul(x, params[f"{prefix}.w1"])), params[f"{prefix}.w2"])


# ---------------------------------------------------------------------------
# fusion and the encoder

@dataclass
class EncoderInput:
    x: Tensor  # (L, D)
    rows: np.ndarray  # grid row per item, -1 for the pseudo cell
    cols: np.ndarray


def patch_embed(
    image: np.ndarray, params: dict, grid: PatchGrid, patch_mask: np.ndarray | None = None
) -> Tensor:
    """Linear projection of flattened P x P patches, row-major; masked
    patches are zeroed before projection."""
    if image.shape != (grid.height, grid.width):
        raise ValueError(f"image {image.shape} does not match grid {grid}")
    p = grid.patch
    px = image.astype(np.float64) / 255.0
    patches = px.reshape(grid.rows, p, grid.cols, p).transpose(0, 2, 1, 3)
    patches = patches.reshape(grid.num_patches, p * p)
    if patch_mask is not None:
        patches = patches * (~patch_mask)[:, None]
    return ag.add(ag.matmul(ag.const(patches), params["patch_proj_w"]), params["patch_proj_b"])


def fuse_vision_text(
    items: list[MixedItem],
    item_emb: Tensor,
    patch_vecs: Tensor,
    grid: PatchGrid,
) -> EncoderInput:
    """Sum each located item with its patch vector; claimed patches are
    omitted, unclaimed patches appended in row-major order."""
    n = grid.num_patches
    sel = np.full(len(items), -1, dtype=np.int64)
    for i, it in enumerate(items):
        idx = patch_index_of(it.bbox, grid)
        if idx is not None:
            sel[i] = idx
    claimed = sorted(set(sel[sel >= 0].tolist()))
    has_cell = sel >= 0
    fused = ag.add(
        item_emb,
        ag.mul(
            ag.take(patch_vecs, np.where(has_cell, sel, 0)),
            ag.const(has_cell.astype(np.float64)[:, None]),
        ),
    )
    unclaimed = np.array([j for j in range(n) if j not in set(claimed)], dtype=np.int64)
    parts = [fused]
    if unclaimed.size:
        parts.append(ag.take(patch_vecs, unclaimed))
    x = ag.concat(parts, axis=0) if len(parts) > 1 else fused
    cells = np.concatenate([sel, unclaimed])
    rows = np.where(cells >= 0, cells // grid.cols, -1)
    cols = np.where(cells >= 0, cells % grid.cols, -1)
    return EncoderInput(x=x, rows=rows, cols=cols)


def encode(enc_in: EncoderInput, params: dict, cfg: ModelConfig) -> Tensor:
    bias = relative_bias_2d(enc_in.rows, enc_in.cols, params, cfg)
    h = enc_in.x
    for i in range(cfg.enc_layers):
        a = _attend(
            ag.rms_norm(h, params[f"enc{i}.attn_norm"]),
            ag.rms_norm(h, params[f"enc{i}.attn_norm"]),
            params, f"enc{i}.attn", cfg, bias=bias,
        )
        h = ag.add(h, a)
        h = ag.add(h, _ffn(ag.rms_norm(h, params[f"enc{i}.ffn_norm"]), params, f"enc{i}.ffn"))
        ag.check_finite(h, f"encoder layer {i}")
    return ag.rms_norm(h, params["enc_final_norm"])


# ---------------------------------------------------------------------------
# decoders

def decode_text_layout(
    enc_states: Tensor, prefix_ids: np.ndarray, params: dict, cfg: ModelConfig
) -> Tensor:
    """Next-token logits over the unified vocabulary for each prefix position."""
    t = len(prefix_ids)
    if t > cfg.max_target_len + 1:
        raise ValueError(f"prefix length {t} exceeds max_target_len")
    h = ag.take(params["tok_emb"], np.asarray(prefix_ids))
    causal = np.where(np.triu(np.ones((t, t)), k=1) > 0, NEG_INF, 0.0)
    bias = relative_bias_1d(t, params, cfg)
    for i in range(cfg.dec_layers):
        xn = ag.rms_norm(h, params[f"dec{i}.self_norm"])
        h = ag.add(h, _attend(xn, xn, params, f"dec{i}.self", cfg, bias=bias, mask=causal))
        xn = ag.rms_norm(h, params[f"dec{i}.cross_norm"])
        h = ag.add(h, _attend(xn, enc_states, params, f"dec{i}.cross", cfg))
        h = ag.add(h, _ffn(ag.rms_norm(h, params[f"dec{i}.ffn_norm"]), params, f"dec{i}.ffn"))
        ag.check_finite(h, f"text decoder layer {i}")
    h = ag.rms_norm(h, params["dec_final_norm"])
    # output projection tied to the embedding table
    return ag.matmul(h, ag.transpose(params["tok_emb"], (1, 0)))


def sinusoidal_2d(grid: PatchGrid, d: int) -> np.ndarray:
    """Fixed 2D position signal: half the channels encode the row, half the
    column."""
    if d % 4:
        raise ValueError("d_model must be a multiple of 4 for 2D positions")
    q = d // 4
    freq = 1.0 / (10000.0 ** (np.arange(q) / q))
    rows = np.repeat(np.arange(grid.rows), grid.cols).astype(np.float64)
    cols = np.tile(np.arange(grid.cols), grid.rows).astype(np.float64)
    ra = rows[:, None] * freq[None, :]
    ca = cols[:, None] * freq[None, :]
    return np.concatenate([np.sin(ra), np.cos(ra), np.sin(ca), np.cos(ca)], axis=1)


def char_ids_of(items: list[MixedItem]) -> np.ndarray:
    """One byte id per character of every text item, in document order."""
    ids: list[int] = []
    for it in items:
        if it.kind == TEXT:
            ids.extend(b for b in it.surface.encode("utf-8", "replace"))
    return np.asarray(ids, dtype=np.int64)


def decode_vision(
    enc_states: Tensor,
    char_ids: np.ndarray,
    patch_mask: np.ndarray,
    params: dict,
    cfg: ModelConfig,
    grid: PatchGrid,
    zero_char_memory: bool = False,
) -> Tensor:
    """Predict all N patches from placeholder embeddings; cross-attention
    memory is the encoder output concatenated with character embeddings."""
    if len(patch_mask) != grid.num_patches:
        raise ValueError(
            f"patch_mask length {len(patch_mask)} != {grid.num_patches} patches"
        )
    h = ag.take(params["vis_placeholder"], patch_mask.astype(np.int64))
    h = ag.add_const(h, sinusoidal_2d(grid, cfg.d_model))
    memory = enc_states
    if char_ids.size:
        chars = ag.take(params["char_emb"], char_ids)
        if zero_char_memory:
            chars = ag.scale(chars, 0.0)
        memory = ag.concat([enc_states, chars], axis=0)
    for i in range(cfg.vis_dec_layers):
        xn = ag.rms_norm(h, params[f"vis{i}.self_norm"])
        h = ag.add(h, _attend(xn, xn, params, f"vis{i}.self", cfg))
        xn = ag.rms_norm(h, params[f"vis{i}.cross_norm"])
        h = ag.add(h, _attend(xn, memory, params, f"vis{i}.cross", cfg))
        h = ag.add(h, _ffn(ag.rms_norm(h, params[f"vis{i}.ffn_norm"]), params, f"vis{i}.ffn"))
        ag.check_finite(h, f"vision decoder layer {i}")
    h = ag.rms_norm(h, params["vis_final_norm"])
    return ag.add(ag.matmul(h, params["vis_out_w"]), params["vis_out_b"])


# ---------------------------------------------------------------------------
# end-to-end forward, losses, gradients

def patchify(image: np.ndarray, grid: PatchGrid) -> np.ndarray:
    p = grid.patch
    px = image.astype(np.float64) / 255.0
    return (
        px.reshape(grid.rows, p, grid.cols, p)
        .transpose(0, 2, 1, 3)
        .reshape(grid.num_patches, p * p)
    )


def unpatchify(patches: np.ndarray, grid: PatchGrid) -> np.ndarray:
    p = grid.patch
    img = patches.reshape(grid.rows, grid.cols, p, p).transpose(0, 2, 1, 3)
    return img.reshape(grid.height, grid.width)


def encode_example(
    ex: TrainingExample, params: dict, cfg: ModelConfig
) -> tuple[Tensor, PatchGrid]:
    grid = PatchGrid(ex.image.shape[0], ex.image.shape[1], cfg.patch)
    patch_vecs = patch_embed(ex.image, params, grid, patch_mask=ex.patch_mask)
    ids = np.asarray([it.id for it in ex.input_items], dtype=np.int64)
    emb = ag.take(params["tok_emb"], ids)
    enc_in = fuse_vision_text(ex.input_items, emb, patch_vecs, grid)
    return encode(enc_in, params, cfg), grid


def loss_text_layout(logits: Tensor, target_ids: np.ndarray, pad_id: int) -> Tensor:
    if len(target_ids) == 0:
        raise ValueError("empty target")
    mask = target_ids != pad_id
    return ag.cross_entropy(logits, target_ids, mask)


def loss_vision(pred: Tensor, target_image: np.ndarray, patch_mask: np.ndarray, grid: PatchGrid) -> Tensor:
    return ag.masked_mse(pred, patchify(target_image, grid), patch_mask)


def example_loss(
    ex: TrainingExample,
    params: dict,
    cfg: ModelConfig,
    vocab: Vocabulary,
    zero_char_memory: bool = False,
) -> Tensor:
    enc_states, grid = encode_example(ex, params, cfg)
    if ex.task == MASKED_IMAGE:
        pred = decode_vision(
            enc_states,
            char_ids_of(ex.input_items),
            ex.patch_mask,
            params,
            cfg,
            grid,
            zero_char_memory=zero_char_memory,
        )
        return loss_vision(pred, ex.pixel_target, ex.patch_mask, grid)
    target = [it.id for it in ex.target_items] + [vocab.eos_id]
    target = target[: cfg.max_target_len]
    prefix = np.asarray([vocab.pad_id] + target[:-1])
    logits = decode_text_layout(enc_states, prefix, params, cfg)
    return loss_text_layout(logits, np.asarray(target), vocab.pad_id)


def gradients(
    ex: TrainingExample,
    params: dict,
    cfg: ModelConfig,
    vocab: Vocabulary,
    zero_char_memory: bool = False,
) -> tuple[float, dict[str, np.ndarray]]:
    for t in params.values():
        t.grad = None
    loss = example_loss(ex, params, cfg, vocab, zero_char_memory=zero_char_memory)
    loss.backward()
    grads = {}
    for name, t in params.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(g)):
            raise ag.NumericError(f"non-finite gradient in {name}")
        grads[name] = g
    return float(loss.data), grads


def greedy_generate(
    enc_states: Tensor, params: dict, cfg: ModelConfig, vocab: Vocabulary, max_len: int
) -> list[int]:
    """Argmax decoding until end-of-sequence or max_len; ties break low-id."""
    prefix = [vocab.pad_id]
    out: list[int] = []
    for _ in range(max_len):
        logits = decode_text_layout(enc_states, np.asarray(prefix), params, cfg)
        nxt = int(np.argmax(logits.data[-1]))
        if nxt == vocab.eos_id:
            break
        out.append(nxt)
        prefix.append(nxt)
    return out


# ---------------------------------------------------------------------------
# checkpoints: JSON header line + little-endian float32 tensor data

def save_checkpoint(path: str, cfg: ModelConfig, params: dict[str, Tensor]) -> None:
    names = list(params)
    manifest = []
    offset = 0
    for name in names:
        shape = list(params[name].shape)
        manifest.append({"name": name, "shape": shape, "offset": offset})
        offset += int(np.prod(shape)) * 4
    header = json.dumps({"config": asdict(cfg), "tensors": manifest})
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(header.encode() + b"\n")
        for name in names:
            f.write(params[name].data.astype("<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[ModelConfig, dict[str, Tensor]]:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        blob = f.read()
    cfg = ModelConfig(**header["config"])
    params: dict[str, Tensor] = {}
    for t in header["tensors"]:
        size = int(np.prod(t["shape"])) * 4
        arr = np.frombuffer(blob[t["offset"] : t["offset"] + size], dtype="<f4")
        params[t["name"]] = ag.param(arr.astype(np.float64).reshape(t["shape"]))
    return cfg, params
