import json

import pytest

from onomas.bench import BenchReport, Cell, bench_run, hardware_threads, speedup

from .helpers import tiny_model

NAMES = ["abc", "fed cab", "a", "bead", "face dab"] * 20


@pytest.fixture(scope="module")
def report():
    return bench_run(tiny_model(0, dtype="float32"), NAMES, batch_sizes=(1, 32, 256), min_samples=256,
                     reps=3, warmup=1, latency_samples=20, label="float")


def test_cells_and_repetitions(report):
    assert [c.batch for c in report.cells] == [1, 32, 256]
    for c in report.cells:
        assert c.reps >= 3 and c.samples_per_second > 0
        assert c.min <= c.samples_per_second <= c.max and c.spread >= 1.0
    assert report.warmup_batches == 1
    assert set(report.latency_ms) >= {"p50", "p95", "p99"}
    assert report.latency_ms["p50"] <= report.latency_ms["p99"]
    assert report.energy_joules == pytest.approx(report.cpu_seconds * 10.0)
    assert report.peak_rss_bytes > 0


def test_batching_beats_single_samples(report):
    assert report.cell(256).samples_per_second > report.cell(1).samples_per_second


def test_argmax_cell_is_marked(report, tmp_path):
    best = report.best_cell()
    rows = [r.split("\t") for r in report.to_tsv().splitlines()[1:]]
    assert [r[0] for r in rows if r[-1] == "*"] == [str(best.batch)]
    tsv, js = report.write(tmp_path / "r")
    data = json.loads(js.read_text())
    assert data["argmax_cell"] == {"batch": best.batch, "threads": 1}
    assert tsv.name == "r.tsv"


def test_speedup_column():
    def rep(label, rate):
        return BenchReport(label, [Cell(8, 1, rate, rate, rate, 3, 1)], {}, 0, 0.0, 10.0, 1, 3, 1)

    fast, slow = rep("int8", 300.0), rep("float", 200.0)
    assert speedup(fast, slow, 8) == 1.5
    assert fast.to_tsv(slow).splitlines()[1].split("\t")[-1] == "1.500"


def test_scaling_table_and_oversubscription_warning():
    hw = hardware_threads()
    rep = bench_run(tiny_model(0, dtype="float32"), NAMES, batch_sizes=(32,), threads=(1, hw + 1),
                    iterations=2, reps=3, warmup=1, latency_samples=5)
    assert any("hardware threads" in w for w in rep.warnings)
    table = rep.scaling(32)
    assert table[1] == {"ratio": 1.0, "efficiency": 1.0}
    assert table[hw + 1]["efficiency"] == pytest.approx(table[hw + 1]["ratio"] / (hw + 1))


def test_argument_checks():
    with pytest.raises(ValueError):
        bench_run(tiny_model(0), NAMES, reps=2)
    with pytest.raises(ValueError):
        bench_run(tiny_model(0), NAMES, warmup=0)
    with pytest.raises(ValueError):
        bench_run(tiny_model(0), [])
