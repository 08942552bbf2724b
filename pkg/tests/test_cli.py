"""End-to-end command-line behaviour: artifacts, reproducibility, exit codes."""

import json

import numpy as np
import pytest

from tscap.cli import main
from tscap.data import load_dataset

TINY_TRAIN = {
    "train": {
        "epochs": 2,
        "batch_size": 16,
        "lr": 1e-3,
        "n_pattern": 2,
        "n_locate": 3,
        "module_embed": 3,
        "conv_channels": 2,
        "n_components": 3,
        "hidden": 6,
        "token_embed": 6,
    }
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY_TRAIN))
    assert main(["synth-gen", "--out", str(root / "synth.jsonl"), "--n", "60",
                 "--t", "9", "--seed", "0"]) == 0
    assert main(["train", "--data", str(root / "synth.jsonl"),
                 "--out", str(root / "model.ckpt"), "--config", str(cfg)]) == 0
    return root


def test_synth_gen_deterministic_and_histogram(tmp_path, capsys):
    out1, out2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert main(["synth-gen", "--out", str(out1), "--n", "30", "--t", "9", "--seed", "5"]) == 0
    printed = capsys.readouterr().out
    assert "increase-begin" in printed and "decrease-end" in printed
    assert main(["synth-gen", "--out", str(out2), "--n", "30", "--t", "9", "--seed", "5"]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    manifest = json.loads((tmp_path / "a.jsonl.manifest.json").read_text())
    assert manifest["version"] and manifest["config"]["seed"] == 5


def test_synth_gen_refuses_overwrite(tmp_path):
    out = tmp_path / "a.jsonl"
    assert main(["synth-gen", "--out", str(out), "--n", "12", "--t", "9"]) == 0
    assert main(["synth-gen", "--out", str(out), "--n", "12", "--t", "9"]) == 1
    assert main(["synth-gen", "--out", str(out), "--n", "12", "--t", "9", "--force"]) == 0


def test_synth_gen_class_subsets(tmp_path):
    out = tmp_path / "four.jsonl"
    assert main(["synth-gen", "--out", str(out), "--n", "40", "--t", "9",
                 "--classes", "4"]) == 0
    ds = load_dataset(out)
    classes = {(inst.meta.trend, inst.meta.location) for inst in ds.instances}
    assert classes == {("increase", "begin"), ("decrease", "end"),
                       ("increase", "middle"), ("decrease", "middle")}
    out2 = tmp_path / "two.jsonl"
    assert main(["synth-gen", "--out", str(out2), "--n", "20", "--t", "9",
                 "--classes", "2"]) == 0
    ds2 = load_dataset(out2)
    assert {(i.meta.trend, i.meta.location) for i in ds2.instances} == {
        ("increase", "end"), ("decrease", "begin")}


def test_synth_gen_transfer_length(tmp_path):
    out = tmp_path / "t24.jsonl"
    assert main(["synth-gen", "--out", str(out), "--n", "12", "--t", "24"]) == 0
    ds = load_dataset(out)
    assert all(len(inst.series) == 24 for inst in ds.instances)


def test_ingest_and_convert(tmp_path):
    csv_dir = tmp_path / "csv"
    csv_dir.mkdir()
    rng = np.random.default_rng(0)
    for name in ("acme_daily", "acme_weekly", "globex_daily"):
        vals = 50 + np.cumsum(rng.normal(0, 1, size=300))
        lines = ["date,price"] + [f"2020-01-{i % 28 + 1:02d},{v:.4f}" for i, v in enumerate(vals)]
        (csv_dir / f"{name}.csv").write_text("\n".join(lines))
    out = tmp_path / "stock.jsonl"
    assert main(["ingest", "--csv-dir", str(csv_dir), "--out", str(out),
                 "--count", "25", "--t", "12", "--seed", "1"]) == 0
    ds = load_dataset(out)
    assert len(ds) == 25
    for inst in ds.instances:
        assert inst.series.min() >= 0.0 and inst.series.max() <= 100.0

    released = tmp_path / "released.json"
    released.write_text(json.dumps([
        {"id": "r0", "values": [1, 2, 3], "annotations": ["rises early"]},
        {"id": "r1", "values": [3, 2, 1], "annotations": ["drops late", "falls"]},
    ]))
    conv = tmp_path / "converted.jsonl"
    assert main(["convert", "--released", str(released), "--out", str(conv)]) == 0
    back = load_dataset(conv)
    assert len(back) == 2
    assert sum(len(i.captions) for i in back.instances) == 3


def test_train_writes_checkpoint_and_metrics(workdir):
    assert (workdir / "model.ckpt").exists()
    lines = (workdir / "model.ckpt.metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2
    row = json.loads(lines[0])
    for key in ("epoch", "elbo", "kl", "aux", "dev_bleu4"):
        assert key in row


def test_train_reproducible_checkpoint(workdir, tmp_path):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY_TRAIN))
    out = tmp_path / "again.ckpt"
    assert main(["train", "--data", str(workdir / "synth.jsonl"), "--out", str(out),
                 "--config", str(cfg)]) == 0
    assert out.read_bytes() == (workdir / "model.ckpt").read_bytes()


def test_train_rejects_unknown_config_key(workdir, tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"train": {"epochs": 1, "bogus_knob": 3}}))
    assert main(["train", "--data", str(workdir / "synth.jsonl"),
                 "--out", str(tmp_path / "x.ckpt"), "--config", str(cfg)]) == 1


def test_caption_greedy_reproducible(workdir, tmp_path):
    out1, out2 = tmp_path / "c1.json", tmp_path / "c2.json"
    for out in (out1, out2):
        assert main(["caption", "--ckpt", str(workdir / "model.ckpt"),
                     "--data", str(workdir / "synth.jsonl"), "--split", "test",
                     "--out", str(out)]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    payload = json.loads(out1.read_text())
    rec = payload["captions"][0]
    for key in ("caption", "program", "truth_score", "pattern_module", "locate_module"):
        assert key in rec


def test_caption_sample_mode_count(workdir, tmp_path):
    out = tmp_path / "samples.json"
    assert main(["caption", "--ckpt", str(workdir / "model.ckpt"),
                 "--data", str(workdir / "synth.jsonl"), "--split", "dev",
                 "--mode", "sample", "--l", "12", "--top-p", "0.9",
                 "--seed", "3", "--out", str(out)]) == 0
    payload = json.loads(out.read_text())
    assert all(len(rec["samples"]) == 12 for rec in payload["captions"])


def test_eval_metrics_suite(workdir, tmp_path):
    out = tmp_path / "metrics.json"
    assert main(["eval", "--ckpt", str(workdir / "model.ckpt"),
                 "--data", str(workdir / "synth.jsonl"), "--suite", "metrics",
                 "--out", str(out)]) == 0
    report = json.loads(out.read_text())["report"]
    for key in ("bleu3", "bleu4", "cider", "rouge_l", "perplexity", "correctness"):
        assert key in report


def test_eval_coverage_suite_with_plot(workdir, tmp_path):
    out = tmp_path / "cov.json"
    plot = tmp_path / "cov.png"
    assert main(["eval", "--ckpt", str(workdir / "model.ckpt"),
                 "--data", str(workdir / "synth.jsonl"), "--suite", "coverage",
                 "--l", "3", "--out", str(out), "--plot", str(plot)]) == 0
    payload = json.loads(out.read_text())
    curve = payload["curves"]["modular"]
    assert [p["top_p"] for p in curve] == [0.3, 0.5, 0.7, 0.9, 1.0]
    assert plot.stat().st_size > 0


def test_eval_analyze_suite(workdir, tmp_path):
    out = tmp_path / "analysis.json"
    assert main(["eval", "--ckpt", str(workdir / "model.ckpt"),
                 "--data", str(workdir / "synth.jsonl"), "--suite", "analyze",
                 "--out", str(out)]) == 0
    payload = json.loads(out.read_text())
    assert "prior_table" in payload and "inference_table" in payload


def test_eval_correctness_needs_meta(workdir, tmp_path):
    bare = tmp_path / "nometa.jsonl"
    ds = load_dataset(workdir / "synth.jsonl")
    for inst in ds.instances:
        inst.meta = None
    from tscap.data import save_dataset

    save_dataset(ds, bare)
    assert main(["eval", "--ckpt", str(workdir / "model.ckpt"), "--data", str(bare),
                 "--suite", "correctness", "--out", str(tmp_path / "r.json")]) == 2


def test_usage_errors_exit_one():
    assert main(["train"]) == 1  # missing required flags
    assert main(["eval", "--ckpt", "x", "--data", "y", "--suite", "bogus",
                 "--out", "z"]) == 1


def test_version_exits_zero(capsys):
    assert main(["--version"]) == 0
    assert "tscap" in capsys.readouterr().out
