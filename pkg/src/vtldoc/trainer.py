"""Mixed-objective training loop, schedule, curriculum, and evaluation."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from .autograd import NumericError
from .corpus import Document, at_resolution
from .geometry import BBox
from .tasks import (
    JOINT_TEXT_LAYOUT,
    LAYOUT_MODELING,
    MASKED_IMAGE,
    VISUAL_TEXT,
    TaskConfig,
    TrainingExample,
    build_joint_text_layout,
    build_layout_modeling,
    build_masked_image,
    build_supervised,
    build_visual_text_recognition,
    example_seed,
)
from .vocab import Vocabulary, detokenize, parse_layout_groups
from .geometry import LayoutQuantizer

_BUILDERS = {
    JOINT_TEXT_LAYOUT: build_joint_text_layout,
    LAYOUT_MODELING: build_layout_modeling,
    VISUAL_TEXT: build_visual_text_recognition,
}


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    warmup_steps: int = 1000
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.98
    batch_size: int = 8
    task_weights: dict = field(
        default_factory=lambda: {
            JOINT_TEXT_LAYOUT: 0.25,
            LAYOUT_MODELING: 0.25,
            VISUAL_TEXT: 0.25,
            MASKED_IMAGE: 0.25,
        }
    )
    # ordered (resolution, epochs) stages; production-scale schedules use 224/512/1024
    curriculum: list = field(default_factory=lambda: [(32, 1), (64, 1)])
    steps_per_epoch: int | None = None
    seed: int = 0

    def validate(self, patch: int) -> None:
        total = sum(self.task_weights.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"task weights sum to {total}, expected 1")
        for res, _ in self.curriculum:
            if res % patch:
                raise ValueError(f"resolution {res} not a multiple of patch {patch}")

    @classmethod
    def from_json(cls, path: str) -> "TrainConfig":
        with open(path, encoding="utf-8") as f:
            obj = json.load(f)
        obj["curriculum"] = [tuple(c) for c in obj.get("curriculum", [(32, 1), (64, 1)])]
        return cls(**obj)


@dataclass
class EvalReport:
    task: str
    metric: str
    value: float
    count: int

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "metric": self.metric,
            "value": self.value,
            "count": self.count,
        }


def learning_rate_at(cfg: TrainConfig, step: int) -> float:
    """Linear warmup to the base rate, constant afterwards."""
    if cfg.warmup_steps <= 0:
        return cfg.learning_rate
    return cfg.learning_rate * min(1.0, step / cfg.warmup_steps)


def sample_task(cfg: TrainConfig, step: int) -> str:
    rng = np.random.default_rng([cfg.seed, step])
    names = sorted(cfg.task_weights)
    probs = np.array([cfg.task_weights[n] for n in names])
    return names[int(rng.choice(len(names), p=probs / probs.sum()))]


def build_example(
    task: str, doc: Document, vocab: Vocabulary, tcfg: TaskConfig, seed: int
) -> TrainingExample:
    if task == MASKED_IMAGE:
        return build_masked_image(doc, vocab, tcfg, seed)
    if task in _BUILDERS:
        return _BUILDERS[task](doc, vocab, tcfg, seed)
    return build_supervised(doc, vocab, task)


class AdamW:
    """Adam with decoupled weight decay; updates applied serially."""

    def __init__(self, params: dict, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for k, tensor in params.items():
            g = grads[k]
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            mhat = self.m[k] / bc1
            vhat = self.v[k] / bc2
            tensor.data -= lr * (mhat / (np.sqrt(vhat) + 1e-8) + c.weight_decay * tensor.data)


class DivergenceError(ArithmeticError):
    pass


def train(
    cfg: TrainConfig,
    docs: list[Document],
    vocab: Vocabulary,
    model_cfg: mdl.ModelConfig,
    params: dict,
    tcfg: TaskConfig | None = None,
    checkpoint_dir: str | None = None,
    log_path: str | None = None,
    on_step=None,
) -> list[dict]:
    """Run the curriculum; returns the step log and writes per-stage
    checkpoints. Raises DivergenceError on non-finite loss, after saving
    the last good checkpoint."""
    if not docs:
        raise ValueError("empty corpus")
    cfg.validate(model_cfg.patch)
    tcfg = tcfg or TaskConfig(patch=model_cfg.patch)
    opt = AdamW(params, cfg)
    log: list[dict] = []
    step = 0
    if checkpoint_dir:
        os.makedirs(checkpoint_dir, exist_ok=True)
        mdl.save_checkpoint(
            os.path.join(checkpoint_dir, "stage0.ckpt"), model_cfg, params
        )
    for stage, (resolution, epochs) in enumerate(cfg.curriculum):
        stage_docs = [at_resolution(d, resolution, resolution) for d in docs]
        per_epoch = cfg.steps_per_epoch
        if per_epoch is None:
            per_epoch = max(1, -(-len(stage_docs) // cfg.batch_size))
        for _ in range(epochs * per_epoch):
            step += 1
            task = sample_task(cfg, step)
            rng = np.random.default_rng([cfg.seed, step, 1])
            picks = rng.integers(len(stage_docs), size=cfg.batch_size)
            total_loss = 0.0
            acc_grads = None
            for di in picks:
                doc = stage_docs[int(di)]
                ex = build_example(
                    task, doc, vocab, tcfg, example_seed(cfg.seed, doc.id, task, step)
                )
                try:
                    loss, grads = mdl.gradients(ex, params, model_cfg, vocab)
                except NumericError as e:
                    if checkpoint_dir:
                        mdl.save_checkpoint(
                            os.path.join(checkpoint_dir, "last_good.ckpt"),
                            model_cfg,
                            params,
                        )
                    raise DivergenceError(f"step {step}: {e}") from e
                total_loss += loss
                if acc_grads is None:
                    acc_grads = grads
                else:
                    for k in acc_grads:
                        acc_grads[k] += grads[k]
            n = len(picks)
            for k in acc_grads:
                acc_grads[k] /= n
            lr = learning_rate_at(cfg, step)
            opt.step(params, acc_grads, lr)
            entry = {
                "step": step,
                "task": task,
                "loss": total_loss / n,
                "rate": lr,
                "resolution": resolution,
            }
            log.append(entry)
            if on_step:
                on_step(entry)
        if checkpoint_dir:
            mdl.save_checkpoint(
                os.path.join(checkpoint_dir, f"stage{stage + 1}.ckpt"),
                model_cfg,
                params,
            )
    if log_path:
        tmp = log_path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as f:
            for entry in log:
                f.write(json.dumps(entry) + "\n")
        os.replace(tmp, log_path)
    return log


# ---------------------------------------------------------------------------
# metrics

def metric_accuracy(preds: list[str], golds: list[str]) -> float:
    if not golds:
        return 0.0
    return sum(p == g for p, g in zip(preds, golds)) / len(golds)


metric_exact_match = metric_accuracy


def _entities(pairs: list[tuple[str, str]]) -> set[tuple[int, int, str]]:
    """Maximal runs of words sharing a tag, as (start, end, tag)."""
    out: set[tuple[int, int, str]] = set()
    i = 0
    while i < len(pairs):
        j = i
        tag = pairs[i][1]
        while j + 1 < len(pairs) and pairs[j + 1][1] == tag:
            j += 1
        out.add((i, j + 1, tag))
        i = j + 1
    return out


def metric_entity_f1(
    pred: list[list[tuple[str, str]]], gold: list[list[tuple[str, str]]]
) -> float:
    tp = fp = fn = 0
    for p, g in zip(pred, gold):
        pe, ge = _entities(p), _entities(g)
        tp += len(pe & ge)
        fp += len(pe - ge)
        fn += len(ge - pe)
    if tp == 0:
        return 0.0
    prec = tp / (tp + fp)
    rec = tp / (tp + fn)
    return 2 * prec * rec / (prec + rec)


def bbox_iou(a: BBox, b: BBox) -> float:
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    area_a = (a.x2 - a.x1) * (a.y2 - a.y1)
    area_b = (b.x2 - b.x1) * (b.y2 - b.y1)
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def metric_bbox_iou(pred: list[BBox], gold: list[BBox]) -> float:
    """Greedy one-to-one matching by descending IoU; unmatched boxes on
    either side count as zero."""
    if not pred and not gold:
        return 0.0
    scored = sorted(
        ((bbox_iou(p, g), i, j) for i, p in enumerate(pred) for j, g in enumerate(gold)),
        key=lambda t: (-t[0], t[1], t[2]),
    )
    used_p: set[int] = set()
    used_g: set[int] = set()
    total = 0.0
    for iou, i, j in scored:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        total += iou
    return total / max(len(pred), len(gold))


def teacher_forced_accuracy(
    ex: TrainingExample, params: dict, cfg: mdl.ModelConfig, vocab: Vocabulary
) -> float:
    enc_states, _ = mdl.encode_example(ex, params, cfg)
    target = [it.id for it in ex.target_items] + [vocab.eos_id]
    target = target[: cfg.max_target_len]
    prefix = np.asarray([vocab.pad_id] + target[:-1])
    logits = mdl.decode_text_layout(enc_states, prefix, params, cfg)
    pred = logits.data.argmax(axis=-1)
    return float((pred == np.asarray(target)).mean())


def _word_tag_pairs(text: str) -> list[tuple[str, str]]:
    pairs: list[tuple[str, str]] = []
    pending: list[str] = []
    for tok in text.split():
        if tok.startswith("[") and tok.endswith("]"):
            tag = tok[1:-1]
            pairs.extend((w, tag) for w in pending)
            pending = []
        else:
            pending.append(tok)
    pairs.extend((w, "") for w in pending)
    return pairs


def evaluate(
    params: dict,
    model_cfg: mdl.ModelConfig,
    vocab: Vocabulary,
    docs: list[Document],
    kind: str,
    resolution: int | None = None,
    max_len: int = 128,
) -> EvalReport:
    """Greedy-generate the supervised target per document and score it.
    Unparseable generations count as wrong, never crash."""
    q = LayoutQuantizer(vocab.granularity)
    preds: list[str] = []
    golds: list[str] = []
    pred_pairs: list[list[tuple[str, str]]] = []
    gold_pairs: list[list[tuple[str, str]]] = []
    iou_total = 0.0
    n = 0
    for doc in docs:
        if resolution:
            doc = at_resolution(doc, resolution, resolution)
        ex = build_supervised(doc, vocab, kind)
        enc_states, _ = mdl.encode_example(ex, params, model_cfg)
        out_ids = mdl.greedy_generate(enc_states, params, model_cfg, vocab, max_len)
        gold_ids = [it.id for it in ex.target_items]
        gold_text = detokenize([vocab.item(i) for i in gold_ids], vocab)
        pred_text = detokenize([vocab.item(i) for i in out_ids], vocab)
        n += 1
        if kind == "entity_tagging":
            pred_pairs.append(_word_tag_pairs(pred_text))
            gold_pairs.append(_word_tag_pairs(gold_text))
        elif kind == "layout_analysis":
            try:
                pg = parse_layout_groups(out_ids, vocab, q)
                pred_boxes = [b for g in pg for b in g.bboxes]
            except ValueError:
                pred_boxes = []
            gg = parse_layout_groups(gold_ids, vocab, q)
            gold_boxes = [b for g in gg for b in g.bboxes]
            iou_total += metric_bbox_iou(pred_boxes, gold_boxes)
        else:
            preds.append(pred_text)
            golds.append(gold_text)
    if kind == "entity_tagging":
        return EvalReport(kind, "entity_f1", metric_entity_f1(pred_pairs, gold_pairs), n)
    if kind == "layout_analysis":
        return EvalReport(kind, "mean_iou", iou_total / n if n else 0.0, n)
    metric = "accuracy" if kind in ("classification", "nli") else "exact_match"
    return EvalReport(kind, metric, metric_accuracy(preds, golds), n)
