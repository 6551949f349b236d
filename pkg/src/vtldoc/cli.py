"""Command-line entry point for the document pipeline."""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import contextmanager

import numpy as np

from . import corpus, model as mdl, report, tasks, trainer
from .autograd import NumericError
from .geometry import InvalidBBoxError
from .tasks import PROMPT_WORDS, TaskConfig
from .vocab import Vocabulary, build_vocab, detokenize

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

_DATA_ERRORS = (
    corpus.SchemaError,
    corpus.CorruptShardError,
    corpus.LayoutOverflowError,
    tasks.MissingAnnotationError,
    tasks.EmptyDocumentError,
    InvalidBBoxError,
    FileNotFoundError,
    json.JSONDecodeError,
    ValueError,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class UsageError(Exception):
    pass


@contextmanager
def _dir_lock(out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    lock = os.path.join(out_dir, ".lock")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UsageError(f"output directory {out_dir} is locked by another run")
    try:
        os.close(fd)
        yield
    finally:
        os.unlink(lock)


def _load_or_build_vocab(path: str, docs: list[corpus.Document]) -> Vocabulary:
    if os.path.exists(path):
        return Vocabulary.load(path)
    words = list(PROMPT_WORDS)
    for doc in docs:
        words.extend(w for w, _ in doc.words)
        words.extend(_label_words(doc.labels))
    vocab = build_vocab(words)
    tmp = path + ".tmp"
    vocab.save(tmp)
    os.replace(tmp, path)
    return vocab


def _label_words(labels: dict) -> list[str]:
    out: list[str] = []
    if not labels:
        return out
    if "class" in labels:
        out.extend(labels["class"].split())
    if "qa" in labels:
        out.extend(labels["qa"]["question"].split())
        out.extend(labels["qa"]["answer"].split())
    if "entity_tags" in labels:
        out.extend(f"[{t}]" for t in labels["entity_tags"])
    if "nli" in labels:
        out.extend(labels["nli"]["label"].split())
        out.extend(labels["nli"]["premise"].split())
        out.extend(labels["nli"]["hypothesis"].split())
    for r in labels.get("regions", []):
        out.extend(r["name"].split())
    if "query" in labels:
        out.extend(labels["query"]["text"].split())
        out.extend(labels["query"]["label"].split())
    return out


def make_parser() -> _Parser:
    p = _Parser(prog="vtldoc", description="vision-text-layout document pipeline")
    p.add_argument("--json", action="store_true", help="machine-readable summary")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("ingest", help="validate OCR JSON into a document store")
    s.add_argument("--in", dest="inputs", nargs="+", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("synth", help="generate a synthetic document corpus")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--out", required=True)

    s = sub.add_parser("build-tasks", help="build training-example shards")
    s.add_argument("--docs", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--task", default="all", help="task name or 'all'")
    s.add_argument("--ratio", type=float, default=None)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--resolution", type=int, default=None)
    s.add_argument("--out", required=True)

    s = sub.add_parser("train", help="train a model on a document store")
    s.add_argument("--docs", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--config", default=None, help="TrainConfig JSON file")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--steps-per-epoch", type=int, default=None)
    s.add_argument("--out", required=True)

    s = sub.add_parser("eval", help="evaluate a checkpoint on labeled documents")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--docs", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--kinds", nargs="+", default=["classification", "qa", "nli"])
    s.add_argument("--resolution", type=int, default=None)
    s.add_argument("--out", required=True)

    s = sub.add_parser("generate", help="greedy generation for one document")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--doc", required=True, help="OCR JSON file")
    s.add_argument("--task", default=tasks.JOINT_TEXT_LAYOUT)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--max-len", type=int, default=128)
    s.add_argument("--resolution", type=int, default=None)

    s = sub.add_parser("reconstruct", help="reconstruct a masked document image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--doc", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--ratio", type=float, default=0.75)
    s.add_argument("--resolution", type=int, default=None)
    s.add_argument("--out", required=True)

    s = sub.add_parser("inspect", help="pretty-print one shard record")
    s.add_argument("--shard", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--index", type=int, default=0)
    return p


def _cmd_ingest(args) -> dict:
    docs = []
    for path in args.inputs:
        with open(path, encoding="utf-8") as f:
            content = f.read()
        base = os.path.dirname(path) or "."
        if path.endswith(".jsonl"):
            for i, line in enumerate(content.splitlines()):
                if line.strip():
                    try:
                        docs.append(corpus.load_ocr_document(line, base_dir=base))
                    except corpus.SchemaError as e:
                        raise corpus.SchemaError(f"{path}:{i + 1}: {e}") from e
        else:
            docs.append(corpus.load_ocr_document(content, base_dir=base))
    with _dir_lock(args.out):
        corpus.write_docs(docs, args.out)
    return {"documents": len(docs), "out": args.out}


def _cmd_synth(args) -> dict:
    docs = [
        corpus.synth_document(args.seed, i, args.height, args.width)
        for i in range(args.count)
    ]
    with _dir_lock(args.out):
        corpus.write_docs(docs, args.out)
    return {"documents": len(docs), "out": args.out}


def _cmd_build_tasks(args) -> dict:
    docs = corpus.read_docs(args.docs)
    vocab = _load_or_build_vocab(args.vocab, docs)
    if args.resolution:
        docs = [corpus.at_resolution(d, args.resolution, args.resolution) for d in docs]
    tcfg = TaskConfig()
    if args.ratio is not None:
        tcfg = TaskConfig(
            ratio_joint=args.ratio,
            ratio_layout=args.ratio,
            ratio_visual_text=args.ratio,
            ratio_image_patches=args.ratio,
        )
    names = tasks.SELF_SUPERVISED_TASKS if args.task == "all" else [args.task]
    examples = []
    for doc in docs:
        for name in names:
            seed = tasks.example_seed(args.seed, doc.id, name)
            examples.append(trainer.build_example(name, doc, vocab, tcfg, seed))
    corpus.write_shard(examples, args.out, fingerprint=f"seed={args.seed}")
    return {"examples": len(examples), "out": args.out}


def _cmd_train(args) -> dict:
    docs = corpus.read_docs(args.docs)
    vocab = _load_or_build_vocab(args.vocab, docs)
    tc = trainer.TrainConfig.from_json(args.config) if args.config else trainer.TrainConfig()
    tc.seed = args.seed
    if args.steps_per_epoch is not None:
        tc.steps_per_epoch = args.steps_per_epoch
    mcfg = mdl.ModelConfig(vocab_size=len(vocab))
    params = mdl.init_params(mcfg, seed=args.seed)
    with _dir_lock(args.out):
        log = trainer.train(
            tc,
            docs,
            vocab,
            mcfg,
            params,
            checkpoint_dir=args.out,
            log_path=os.path.join(args.out, "steps.jsonl"),
        )
        report.write_step_csv(log, os.path.join(args.out, "steps.csv"))
        report.render_loss_curve(log, os.path.join(args.out, "loss_curve.png"))
    return {"steps": len(log), "final_loss": log[-1]["loss"] if log else None, "out": args.out}


def _cmd_eval(args) -> dict:
    mcfg, params = mdl.load_checkpoint(args.ckpt)
    vocab = Vocabulary.load(args.vocab)
    docs = corpus.read_docs(args.docs)
    reports = []
    for kind in args.kinds:
        r = trainer.evaluate(
            params, mcfg, vocab, docs, kind, resolution=args.resolution
        )
        reports.append(r.to_dict())
    with _dir_lock(args.out):
        tmp = os.path.join(args.out, "report.json.tmp")
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(reports, f, indent=2)
        os.replace(tmp, os.path.join(args.out, "report.json"))
        report.write_report_csv(reports, os.path.join(args.out, "report.csv"))
        report.render_metric_bars(reports, os.path.join(args.out, "metrics.png"))
    return {"reports": reports, "out": args.out}


def _load_doc_for_model(args, mcfg) -> corpus.Document:
    with open(args.doc, encoding="utf-8") as f:
        doc = corpus.load_ocr_document(f.read(), base_dir=os.path.dirname(args.doc) or ".")
    res = args.resolution
    if res is None:
        # round up to a patch multiple so the grid is valid
        res = max(mcfg.patch, (max(doc.height, doc.width) + mcfg.patch - 1) // mcfg.patch * mcfg.patch)
        doc.synthetic = True
    return corpus.at_resolution(doc, res, res)


def _cmd_generate(args) -> dict:
    mcfg, params = mdl.load_checkpoint(args.ckpt)
    vocab = Vocabulary.load(args.vocab)
    doc = _load_doc_for_model(args, mcfg)
    tcfg = TaskConfig(patch=mcfg.patch)
    ex = trainer.build_example(args.task, doc, vocab, tcfg, args.seed)
    enc_states, _ = mdl.encode_example(ex, params, mcfg)
    ids = mdl.greedy_generate(enc_states, params, mcfg, vocab, args.max_len)
    text = detokenize([vocab.item(i) for i in ids], vocab)
    return {
        "task": args.task,
        "input": detokenize(ex.input_items, vocab),
        "generated": text,
    }


def _cmd_reconstruct(args) -> dict:
    mcfg, params = mdl.load_checkpoint(args.ckpt)
    vocab = Vocabulary.load(args.vocab)
    doc = _load_doc_for_model(args, mcfg)
    tcfg = TaskConfig(patch=mcfg.patch, ratio_image_patches=args.ratio)
    ex = tasks.build_masked_image(doc, vocab, tcfg, args.seed)
    enc_states, grid = mdl.encode_example(ex, params, mcfg)
    pred = mdl.decode_vision(
        enc_states, mdl.char_ids_of(ex.input_items), ex.patch_mask, params, mcfg, grid
    )
    img = np.clip(np.round(mdl.unpatchify(pred.data, grid) * 255.0), 0, 255).astype(np.uint8)
    corpus.write_pgm(args.out, img)
    return {"out": args.out, "masked_patches": int(ex.patch_mask.sum())}


def _cmd_inspect(args) -> dict:
    vocab = Vocabulary.load(args.vocab)
    examples = corpus.read_shard(args.shard)
    if not (0 <= args.index < len(examples)):
        raise UsageError(f"index {args.index} out of range (shard has {len(examples)})")
    ex = examples[args.index]
    out = {
        "task": ex.task,
        "doc_id": ex.doc_id,
        "seed": ex.seed,
        "input": detokenize(ex.input_items, vocab),
        "target": None
        if ex.target_items is None
        else detokenize(ex.target_items, vocab),
        "image_shape": list(ex.image.shape),
        "masked_patches": None if ex.patch_mask is None else int(ex.patch_mask.sum()),
    }
    return out


_COMMANDS = {
    "ingest": _cmd_ingest,
    "synth": _cmd_synth,
    "build-tasks": _cmd_build_tasks,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "generate": _cmd_generate,
    "reconstruct": _cmd_reconstruct,
    "inspect": _cmd_inspect,
}


def run(argv: list[str]) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return int(e.code or 0)
    try:
        summary = _COMMANDS[args.cmd](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, trainer.DivergenceError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except _DATA_ERRORS as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    if args.json:
        print(json.dumps(summary, indent=2))
    else:
        for k, v in summary.items():
            print(f"{k}: {v}")
    return EXIT_OK


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
