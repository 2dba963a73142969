import json

import pytest

from onomas import store
from onomas.cli import main, read_config

SMALL = ["--embed-dim", "16", "--kernel-sizes", "1,3", "--filters", "8,8", "--groups", "2", "--max-len", "24",
         "--epochs", "1,1,1", "--peak-lr", "0.01"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(d / "corpus.tsv"), "--langs", "2", "--clusters", "2",
                 "--per-class", "30", "--seed", "7"]) == 0
    assert main(["train", "--train", str(d / "corpus.tsv"), "--out", str(d / "m.onmx"), "--seed", "1", *SMALL]) == 0
    return d


def test_synth_line_count(tmp_path):
    out = tmp_path / "c.tsv"
    assert main(["synth", "--out", str(out), "--langs", "4", "--per-class", "500", "--seed", "7"]) == 0
    lines = out.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 8000 and all(len(ln.split("\t")) == 3 for ln in lines)


def test_train_is_seeded(workdir, tmp_path):
    again = tmp_path / "again.onmx"
    assert main(["train", "--train", str(workdir / "corpus.tsv"), "--out", str(again), "--seed", "1", *SMALL]) == 0
    assert store.load(again).fingerprint() == store.load(workdir / "m.onmx").fingerprint()


def test_eval_writes_reports(workdir, capsys):
    assert main(["eval", "--model", str(workdir / "m.onmx"), "--test", str(workdir / "corpus.tsv")]) == 0
    assert "accuracy=" in capsys.readouterr().out
    data = json.loads((workdir / "corpus.eval.json").read_text())
    assert data["n_samples"] == 240 and 0.0 <= data["accuracy"] <= 1.0
    assert (workdir / "corpus.eval.txt").exists() and (workdir / "corpus.eval.pairs.tsv").exists()


def test_predict_rows_order_and_errors(workdir):
    names = ["Anna Berg", "   ", "Zed", "with\ttab"]
    (workdir / "names.txt").write_text("\n".join(names) + "\n", encoding="utf-8")
    out = workdir / "preds.tsv"
    assert main(["predict", "--model", str(workdir / "m.onmx"), "--in", str(workdir / "names.txt"),
                 "--out", str(out)]) == 0
    rows = [r.split("\t") for r in out.read_text(encoding="utf-8").splitlines()]
    assert len(rows) == len(names)
    assert [r[0] for r in rows] == ["Anna Berg", "   ", "Zed", "with tab"]
    assert rows[1][3].startswith("error:") and rows[1][1] == ""
    for r in (rows[0], rows[2], rows[3]):
        assert len(r) == 4 and r[1] and r[2] and 0.0 <= float(r[3]) <= 1.0


def test_quantize_and_use_int8_model(workdir, capsys):
    q = workdir / "q.onmx"
    assert main(["quantize", "--model", str(workdir / "m.onmx"), "--out", str(q)]) == 0
    assert "ratio=" in capsys.readouterr().out
    assert main(["eval", "--model", str(q), "--test", str(workdir / "corpus.tsv"), "--out", str(workdir / "q")]) == 0
    assert (workdir / "q.json").exists()
    assert main(["quantize", "--model", str(q), "--out", str(workdir / "qq.onmx")]) == 3


def test_bench_reports_speedup_column(workdir, capsys):
    prefix = workdir / "bench"
    rc = main(["bench", "--model", str(workdir / "m.onmx"), "--vs-quantized", "--batches", "1,8", "--min-samples",
               "16", "--reps", "3", "--warmup", "1", "--latency-samples", "5", "--out", str(prefix)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "# float" in out and "# int8" in out
    header = (workdir / "bench.int8.tsv").read_text().splitlines()[0]
    assert "speedup" in header
    assert json.loads((workdir / "bench.float.json").read_text())["cells"]


def test_config_file_and_flag_override(workdir, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# synth settings\nout = {}\nlangs=2\nper-class = 3\n".format(tmp_path / "from_cfg.tsv"))
    assert read_config(cfg)["per_class"] == "3"
    assert main(["synth", "--config", str(cfg)]) == 0
    assert len((tmp_path / "from_cfg.tsv").read_text().splitlines()) == 2 * 4 * 3
    assert main(["synth", "--config", str(cfg), "--per-class", "5"]) == 0
    assert len((tmp_path / "from_cfg.tsv").read_text().splitlines()) == 2 * 4 * 5
    cfg.write_text("no_such_option = 1\n")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "x.tsv")]) == 1


def test_exit_codes(workdir, tmp_path, capsys):
    assert main(["synth", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err.lower()
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["--help"]) == 0
    assert main(["eval", "--model", str(tmp_path / "missing.onmx"), "--test", str(workdir / "corpus.tsv")]) == 3
    junk = tmp_path / "junk.onmx"
    junk.write_bytes(b"not a model at all")
    assert main(["predict", "--model", str(junk), "--in", str(workdir / "names.txt")]) == 3
    bad = tmp_path / "bad.tsv"
    bad.write_text("only two\tcolumns\n", encoding="utf-8")
    assert main(["eval", "--model", str(workdir / "m.onmx"), "--test", str(bad)]) == 2
    assert main(["train", "--train", str(tmp_path / "nope.tsv"), "--out", str(tmp_path / "o.onmx")]) == 2


def test_checkpoint_resume_and_refusal(workdir, tmp_path):
    ck = tmp_path / "ck.onmx"
    args = ["train", "--train", str(workdir / "corpus.tsv"), "--checkpoint", str(ck), *SMALL]
    assert main([*args, "--out", str(tmp_path / "a.onmx"), "--seed", "1"]) == 0
    assert main([*args, "--out", str(tmp_path / "b.onmx"), "--seed", "1"]) == 0
    assert (tmp_path / "a.onmx").read_bytes() == (tmp_path / "b.onmx").read_bytes()
    assert main([*args, "--out", str(tmp_path / "c.onmx"), "--seed", "2"]) == 4
