import json
import os

import pytest

from vtldoc import cli
from vtldoc.corpus import read_docs, read_pgm, read_shard


def run(*argv):
    return cli.run(list(argv))


@pytest.fixture(scope="module")
def store(tmp_path_factory):
    """A small synthetic corpus plus vocab and shard built through the CLI."""
    root = tmp_path_factory.mktemp("store")
    docs = str(root / "docs")
    vocab = str(root / "vocab.json")
    shard = str(root / "tasks.jsonl")
    assert run("synth", "--count", "3", "--seed", "11", "--height", "32",
               "--width", "32", "--out", docs) == 0
    assert run("build-tasks", "--docs", docs, "--vocab", vocab,
               "--seed", "1", "--out", shard) == 0
    return {"root": root, "docs": docs, "vocab": vocab, "shard": shard}


@pytest.fixture(scope="module")
def trained(store, tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = str(root / "train.json")
    with open(cfg, "w") as f:
        json.dump({"curriculum": [[32, 1]], "batch_size": 1,
                   "learning_rate": 1e-4, "warmup_steps": 2}, f)
    out = str(root / "out")
    assert run("train", "--docs", store["docs"], "--vocab", store["vocab"],
               "--config", cfg, "--seed", "7", "--steps-per-epoch", "2",
               "--out", out) == 0
    return out


class TestHelp:
    def test_top_level(self, capsys):
        assert run("--help") == 0
        assert "vtldoc" in capsys.readouterr().out

    @pytest.mark.parametrize("cmd", ["ingest", "synth", "build-tasks", "train",
                                     "eval", "generate", "reconstruct", "inspect"])
    def test_subcommand(self, cmd, capsys):
        assert run(cmd, "--help") == 0
        assert "--" in capsys.readouterr().out

    def test_missing_subcommand_is_usage_error(self, capsys):
        assert run() == cli.EXIT_USAGE

    def test_missing_required_flag(self, capsys):
        assert run("synth", "--count", "3", "--out", "x") == cli.EXIT_USAGE
        assert "usage" in capsys.readouterr().err.lower()


class TestSynthAndIngest:
    def test_synth_writes_documents(self, store):
        docs = read_docs(store["docs"])
        assert len(docs) == 3
        assert all(d.image.shape == (32, 32) for d in docs)

    def test_synth_reruns_identical(self, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = str(tmp_path / name)
            assert run("synth", "--count", "2", "--seed", "4", "--out", out) == 0
            with open(os.path.join(out, "docs.jsonl"), "rb") as f:
                outs.append(f.read())
        assert outs[0] == outs[1]

    def test_ingest_valid(self, tmp_path, capsys):
        src = tmp_path / "doc.json"
        src.write_text(json.dumps({
            "id": "d0",
            "image": {"width": 32, "height": 32},
            "words": [{"text": "Hello", "bbox": [0.1, 0.1, 0.4, 0.2]}],
        }))
        out = str(tmp_path / "store")
        assert run("--json", "ingest", "--in", str(src), "--out", out) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["documents"] == 1
        assert len(read_docs(out)) == 1

    def test_ingest_bad_schema_exit_2(self, tmp_path, capsys):
        src = tmp_path / "bad.json"
        src.write_text(json.dumps({
            "id": "d0",
            "image": {"width": 32, "height": 32},
            "words": [{"text": "x", "bbox": [0.5, 0.5, 0.4, 0.6]}],
        }))
        assert run("ingest", "--in", str(src), "--out",
                   str(tmp_path / "o")) == cli.EXIT_DATA
        assert "data error" in capsys.readouterr().err

    def test_missing_input_file_exit_2(self, tmp_path):
        assert run("ingest", "--in", str(tmp_path / "nope.json"), "--out",
                   str(tmp_path / "o")) == cli.EXIT_DATA

    def test_lock_file_blocks_second_run(self, tmp_path):
        out = str(tmp_path / "locked")
        os.makedirs(out)
        open(os.path.join(out, ".lock"), "w").close()
        assert run("synth", "--count", "1", "--seed", "0",
                   "--out", out) == cli.EXIT_USAGE

    def test_lock_released_after_success(self, store):
        assert not os.path.exists(os.path.join(store["docs"], ".lock"))


class TestBuildTasks:
    def test_shard_contents(self, store):
        examples = read_shard(store["shard"])
        # 3 docs x 4 self-supervised tasks
        assert len(examples) == 12
        assert len({ex.task for ex in examples}) == 4

    def test_vocab_written(self, store):
        assert os.path.exists(store["vocab"])

    def test_rerun_byte_identical(self, store, tmp_path):
        again = str(tmp_path / "again.jsonl")
        assert run("build-tasks", "--docs", store["docs"], "--vocab",
                   store["vocab"], "--seed", "1", "--out", again) == 0
        with open(store["shard"], "rb") as a, open(again, "rb") as b:
            assert a.read() == b.read()

    def test_single_task(self, store, tmp_path):
        out = str(tmp_path / "one.jsonl")
        assert run("build-tasks", "--docs", store["docs"], "--vocab",
                   store["vocab"], "--task", "layout_modeling",
                   "--seed", "2", "--out", out) == 0
        assert all(ex.task == "layout_modeling" for ex in read_shard(out))

    def test_unknown_task_exit_2(self, store, tmp_path):
        assert run("build-tasks", "--docs", store["docs"], "--vocab",
                   store["vocab"], "--task", "nope", "--seed", "2",
                   "--out", str(tmp_path / "x.jsonl")) == cli.EXIT_DATA

    def test_inspect(self, store, capsys):
        assert run("--json", "inspect", "--shard", store["shard"],
                   "--vocab", store["vocab"], "--index", "0") == 0
        out = json.loads(capsys.readouterr().out)
        assert out["task"] and out["input"]
        assert out["image_shape"] == [32, 32]

    def test_inspect_index_out_of_range(self, store, capsys):
        assert run("inspect", "--shard", store["shard"], "--vocab",
                   store["vocab"], "--index", "99") == cli.EXIT_USAGE


class TestTrainEval:
    def test_artifacts(self, trained):
        for name in ("stage1.ckpt", "steps.jsonl", "steps.csv", "loss_curve.png"):
            assert os.path.exists(os.path.join(trained, name)), name
        with open(os.path.join(trained, "loss_curve.png"), "rb") as f:
            assert f.read(8) == b"\x89PNG\r\n\x1a\n"

    def test_step_log_schema(self, trained):
        with open(os.path.join(trained, "steps.jsonl")) as f:
            entries = [json.loads(line) for line in f]
        assert len(entries) == 2
        for e in entries:
            assert set(e) >= {"step", "task", "loss", "rate", "resolution"}

    def test_eval_artifacts(self, trained, store, tmp_path, capsys):
        out = str(tmp_path / "eval")
        assert run("--json", "eval", "--ckpt",
                   os.path.join(trained, "stage1.ckpt"),
                   "--docs", store["docs"], "--vocab", store["vocab"],
                   "--kinds", "classification", "--resolution", "32",
                   "--out", out) == 0
        reports = json.loads(capsys.readouterr().out)["reports"]
        assert reports[0]["task"] == "classification"
        for name in ("report.json", "report.csv", "metrics.png"):
            assert os.path.exists(os.path.join(out, name)), name

    def test_missing_checkpoint_exit_2(self, store, tmp_path):
        assert run("eval", "--ckpt", str(tmp_path / "no.ckpt"),
                   "--docs", store["docs"], "--vocab", store["vocab"],
                   "--out", str(tmp_path / "e")) == cli.EXIT_DATA


@pytest.fixture(scope="module")
def ocr_doc(tmp_path_factory):
    p = tmp_path_factory.mktemp("ocr") / "doc.json"
    p.write_text(json.dumps({
        "id": "g0",
        "image": {"width": 32, "height": 32},
        "words": [{"text": "alpha", "bbox": [0.1, 0.1, 0.5, 0.3]},
                  {"text": "beta", "bbox": [0.1, 0.4, 0.5, 0.6]}],
    }))
    return str(p)


class TestGenerateReconstruct:
    def test_generate(self, trained, store, ocr_doc, capsys):
        assert run("--json", "generate", "--ckpt",
                   os.path.join(trained, "stage1.ckpt"),
                   "--vocab", store["vocab"], "--doc", ocr_doc,
                   "--seed", "0", "--max-len", "8", "--resolution", "32") == 0
        out = json.loads(capsys.readouterr().out)
        assert out["task"] == "joint_text_layout"
        assert isinstance(out["generated"], str)

    def test_reconstruct_writes_image(self, trained, store, ocr_doc, tmp_path):
        out = str(tmp_path / "recon.pgm")
        assert run("reconstruct", "--ckpt",
                   os.path.join(trained, "stage1.ckpt"),
                   "--vocab", store["vocab"], "--doc", ocr_doc,
                   "--seed", "0", "--resolution", "32", "--out", out) == 0
        assert read_pgm(out).shape == (32, 32)
