"""End-to-end tests of the command line: every subcommand plus exit codes."""

import json
import subprocess
import sys

import numpy as np
import pytest

from neufa.cli import main
from neufa.data import load_alignments, load_corpus, save_alignments

SPEC = dict(vocab_size=7, d_mel=4, corpus_size=5, tokens_min=2, tokens_max=4, seed=1)
MODEL = dict(
    vocab_size=7, d_mel=4, text_width=8, speech_width=8, d_a=8,
    decoder_width=8, detector_channels=2, detector_kernel=5, seed=3,
)
SCHEDULE = dict(
    stage1={"steps": 2, "loss_weights": [0.1, 1, 10, 10, 1000, 0]},
    stage2={"steps": 2, "loss_weights": [0.1, 1, 10, 10, 0, 100]},
    batch_size=2,
)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run gen-data -> train -> align once; hand the paths to each test."""
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.json"
    spec.write_text(json.dumps(SPEC))
    corpus = root / "corpus.jsonl"
    assert main(["gen-data", "--spec", str(spec), "--out", str(corpus)]) == 0

    config = root / "config.json"
    config.write_text(json.dumps({"model": MODEL, "schedule": SCHEDULE}))
    ckpt_dir = root / "run"
    assert main(["train", "--config", str(config), "--corpus", str(corpus),
                 "--out", str(ckpt_dir)]) == 0

    align_dir = root / "aligned"
    assert main(["align", "--ckpt", str(ckpt_dir / "final.nfa"),
                 "--corpus", str(corpus), "--out", str(align_dir)]) == 0
    return {"root": root, "spec": spec, "corpus": corpus, "config": config,
            "ckpt_dir": ckpt_dir, "align_dir": align_dir}


def test_gen_data_writes_loadable_corpus(pipeline):
    corpus = load_corpus(pipeline["corpus"])
    assert len(corpus) == SPEC["corpus_size"]
    assert all(u.frames.shape[1] == SPEC["d_mel"] for u in corpus)


def test_gen_data_deterministic(pipeline, tmp_path):
    again = tmp_path / "again.jsonl"
    assert main(["gen-data", "--spec", str(pipeline["spec"]), "--out", str(again)]) == 0
    assert again.read_bytes() == pipeline["corpus"].read_bytes()


def test_train_writes_checkpoint_and_history(pipeline):
    ckpt_dir = pipeline["ckpt_dir"]
    assert (ckpt_dir / "final.nfa").exists()
    history = json.loads((ckpt_dir / "history.json").read_text())
    steps = SCHEDULE["stage1"]["steps"] + SCHEDULE["stage2"]["steps"]
    assert len(history) == steps
    assert {"stage", "step", "total"} <= set(history[0])


def test_align_outputs_per_utterance(pipeline):
    align_dir = pipeline["align_dir"]
    corpus = load_corpus(pipeline["corpus"])
    for utt in corpus:
        assert (align_dir / f"{utt.id}.TextGrid").exists()
        w_tts = np.loadtxt(align_dir / f"{utt.id}.w_tts.csv", delimiter=",", ndmin=2)
        w_asr = np.loadtxt(align_dir / f"{utt.id}.w_asr.csv", delimiter=",", ndmin=2)
        assert w_tts.shape == (utt.n_tokens, utt.n_frames)
        assert w_asr.shape == (utt.n_frames, utt.n_tokens)
    alignments = load_alignments(align_dir / "alignments.jsonl")
    assert set(alignments) == {u.id for u in corpus}


def test_eval_reports_metrics(pipeline, tmp_path, capsys):
    report = tmp_path / "report.json"
    code = main(["eval", "--pred", str(pipeline["align_dir"]),
                 "--ref", str(pipeline["corpus"]), "--report", str(report)])
    assert code == 0
    d = json.loads(report.read_text())
    assert d["mae_ms"] >= 0
    assert set(d["accuracy"]) == {"10", "25", "50", "100"}
    out = capsys.readouterr().out
    assert "MAE(ms)" in out and "acc@50" in out


def test_eval_accepts_alignments_file_directly(pipeline, tmp_path):
    report = tmp_path / "report.json"
    pred = pipeline["align_dir"] / "alignments.jsonl"
    assert main(["eval", "--pred", str(pred), "--ref", str(pipeline["corpus"]),
                 "--report", str(report)]) == 0


def test_eval_perfect_predictions_score_zero(pipeline, tmp_path):
    corpus = load_corpus(pipeline["corpus"])
    pred = tmp_path / "gt.jsonl"
    save_alignments({u.id: u.gt_boundaries for u in corpus}, pred)
    report = tmp_path / "report.json"
    assert main(["eval", "--pred", str(pred), "--ref", str(pipeline["corpus"]),
                 "--report", str(report)]) == 0
    d = json.loads(report.read_text())
    assert d["mae_ms"] == 0.0
    assert all(v == 1.0 for v in d["accuracy"].values())


def test_eval_id_mismatch_is_validation_failure(pipeline, tmp_path):
    pred = tmp_path / "other.jsonl"
    corpus = load_corpus(pipeline["corpus"])
    save_alignments({"nope": corpus[0].gt_boundaries}, pred)
    code = main(["eval", "--pred", str(pred), "--ref", str(pipeline["corpus"]),
                 "--report", str(tmp_path / "r.json")])
    assert code == 1


def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--seeds", "1"]) == 0
    out = capsys.readouterr().out
    for name in ("matmul", "softmax", "gru", "detector_stack", "end_to_end_micro"):
        assert name in out
    assert "FAIL" not in out


def test_ablate_trains_pair(pipeline, tmp_path, capsys):
    config = tmp_path / "config.json"
    schedule = dict(SCHEDULE)
    schedule["stage1"] = {"steps": 1, "loss_weights": [0.1, 1, 10, 10, 1000, 0]}
    schedule["stage2"] = {"steps": 0, "loss_weights": [0.1, 1, 10, 10, 0, 100]}
    config.write_text(json.dumps({"model": MODEL, "schedule": schedule}))
    out = tmp_path / "ablation.json"
    code = main(["ablate", "--variant", "asr", "--config", str(config),
                 "--corpus", str(pipeline["corpus"]), "--out", str(out)])
    assert code == 0
    d = json.loads(out.read_text())
    assert d["variant"] == "asr"
    assert len(d["per_seed"]) == 1
    pair = d["per_seed"][0]
    assert {"baseline", "variant", "seed"} <= set(pair)
    assert "baseline seed 0" in capsys.readouterr().out


# -- exit codes --------------------------------------------------------------------


def test_unknown_subcommand_exits_1(capsys):
    assert main(["frobnicate"]) == 1
    assert "error" in capsys.readouterr().err


def test_missing_required_argument_exits_1(capsys):
    assert main(["gen-data", "--out", "x.jsonl"]) == 1


def test_missing_spec_file_exits_1(tmp_path, capsys):
    code = main(["gen-data", "--spec", str(tmp_path / "none.json"),
                 "--out", str(tmp_path / "c.jsonl")])
    assert code == 1


def test_bad_spec_field_exits_1(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"vocab_size": 7, "frobs": 3}))
    assert main(["gen-data", "--spec", str(spec), "--out", str(tmp_path / "c.jsonl")]) == 1
    assert "frobs" in capsys.readouterr().err


def test_unparseable_config_exits_1(pipeline, tmp_path, capsys):
    config = tmp_path / "config.json"
    config.write_text("{not json")
    code = main(["train", "--config", str(config),
                 "--corpus", str(pipeline["corpus"]), "--out", str(tmp_path / "run")])
    assert code == 1
    assert "JSON" in capsys.readouterr().err


def test_vocab_overflow_exits_1(pipeline, tmp_path):
    model = dict(MODEL)
    model["vocab_size"] = 2  # corpus tokens exceed this
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"model": model, "schedule": SCHEDULE}))
    code = main(["train", "--config", str(config),
                 "--corpus", str(pipeline["corpus"]), "--out", str(tmp_path / "run")])
    assert code == 1


def test_bad_checkpoint_exits_1(pipeline, tmp_path):
    fake = tmp_path / "fake.nfa"
    fake.write_bytes(b"not a checkpoint")
    code = main(["align", "--ckpt", str(fake), "--corpus", str(pipeline["corpus"]),
                 "--out", str(tmp_path / "aligned")])
    assert code == 1


def test_module_invocation(tmp_path, pipeline):
    out = tmp_path / "sub.jsonl"
    proc = subprocess.run(
        [sys.executable, "-m", "neufa.cli", "gen-data",
         "--spec", str(pipeline["spec"]), "--out", str(out)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert "wrote 5 utterances" in proc.stdout
