"""The ten acceptance criteria, one test each; every test records a PASS/FAIL line."""
import time
from collections import Counter

import numpy as np
import pytest

from onomas import store
from onomas.bench import bench_run, hardware_threads, speedup
from onomas.data import (
    AugmentConfig,
    NameRecord,
    SplitSpec,
    Vocab,
    augment,
    augment_trace,
    build_balanced_test,
    class_weights,
    encode_batch,
    stratified_split,
    synth_corpus,
)
from onomas.data.augment import record_rng
from onomas.model import ModelConfig, OnomasCNN
from onomas.nn import Tensor, grad_check
from onomas.nn import functional as F
from onomas.quant import quantize_weights
from onomas.taxonomy import Taxonomy
from onomas.train import OptimConfig, StagePlan, Trainer, train

from .helpers import check_metrics_against_oracles, criterion, metric_trial, random_batch, tiny_model
from .test_model import _tiny_e2e_model
from .test_nn import CASES

DESK_EPOCHS = (10, 10, 10)


def balanced_accuracy(model, records):
    tax = model.taxonomy
    ids, lengths = encode_batch([r.raw for r in records], model.vocab, model.config.max_len)
    pred = model.predict_proba(ids, lengths).argmax(1)
    y = np.array([r.class_id(tax) for r in records])
    return float(np.mean([np.mean(pred[y == c] == c) for c in np.unique(y)]))


@pytest.fixture(scope="module")
def desk():
    """Three-stage training on the 4-language x 4-type synthetic corpus, timed."""
    tax = Taxonomy.grouped(4, 2)
    records = synth_corpus(tax, 500, seed=7)
    sp = stratified_split(records, SplitSpec(seed=1), tax)
    vocab = Vocab.from_characters(r.raw for r in records)
    cfg = ModelConfig(embed_dim=32, vocab_size=len(vocab), max_len=32, kernel_sizes=(1, 2, 3),
                      filter_counts=(24, 24, 24), groups=4, num_clusters=2, seed=3)
    t0 = time.perf_counter()
    result = train(OnomasCNN(cfg, tax, vocab), sp.train, sp.val_a, StagePlan.progressive(DESK_EPOCHS),
                   OptimConfig(peak_lr=1e-2, micro_batch=64), AugmentConfig(seed=5),
                   class_weights=class_weights(sp.train, tax))
    seconds = time.perf_counter() - t0
    held = synth_corpus(tax, 200, seed=7, sample_seed=99)
    test = build_balanced_test(held, 100, tax, exclude=sp.train)
    return result, seconds, test


@pytest.fixture(scope="module")
def default_pair():
    """Default-architecture float model and its int8 twin, with benchmark names."""
    tax = Taxonomy.grouped(4, 2)
    names = [r.raw for r in synth_corpus(tax, 64, seed=11)]
    vocab = Vocab.from_characters(names)
    model = OnomasCNN(ModelConfig(vocab_size=len(vocab), num_clusters=2), tax, vocab)
    return model, quantize_weights(model), names


@pytest.fixture(scope="module")
def default_bench(default_pair):
    model, qmodel, names = default_pair
    opts = dict(batch_sizes=(1, 256), min_samples=768, reps=3, warmup=3, latency_samples=20)
    return bench_run(model, names, label="float", **opts), bench_run(qmodel, names, label="int8", **opts)


def test_criterion_01_gradient_correctness():
    with criterion(1, "gradient correctness") as c:
        t0 = time.perf_counter()
        worst = {}
        for name, case in sorted(CASES.items()):
            worst[name] = max(
                grad_check(*case(np.random.default_rng([seed, len(name)]))).max_rel_error for seed in range(20)
            )
        e2e = 0.0
        for seed in range(20):
            m = _tiny_e2e_model(seed)
            rng = np.random.default_rng(seed)
            for p in m.params.values():
                p.data = p.data + rng.standard_normal(p.shape) * 0.1
            ids, lengths = random_batch(rng, 3, 6, m.config.vocab_size)
            targets = rng.integers(0, 4, 3)

            def loss():
                probs = m.probs(ids, lengths, training=True, step_key=seed, row_keys=np.arange(3, dtype=np.uint64))
                return F.focal_loss(probs, targets, 0.25, 2.0)

            e2e = max(e2e, grad_check(loss, list(m.params.values())).max_rel_error)
        seconds = time.perf_counter() - t0
        top = max(worst.values())
        c.detail = f"{len(worst)} ops x 20 seeds worst {top:.1e}; end-to-end worst {e2e:.1e}; {seconds:.1f}s"
        assert top < 1e-4, max(worst, key=worst.get)
        assert e2e < 1e-4
        assert seconds < 120


def test_criterion_02_probability_mass():
    with criterion(2, "probability mass") as c:
        worst = 0.0
        rng = np.random.default_rng(2)
        for seed in range(20):
            m = tiny_model(seed, dtype="float32", n_langs=3, n_clusters=2)
            ids, lengths = random_batch(rng, 500, 8, m.config.vocab_size)
            worst = max(worst, float(np.abs(m.predict_proba(ids, lengths).sum(1) - 1).max()))
            if seed % 5 == 0:
                worst = max(worst, float(np.abs(m.probs(ids, lengths).data.sum(1) - 1).max()))
        leaf = rng.standard_normal((1000, 9)) * 4
        idx = [rng.permutation(9)]
        hp = F.hierarchical_probs(Tensor(rng.standard_normal((1000, 1))), [Tensor(leaf)], idx, 9).data
        flat = np.zeros_like(hp)
        flat[:, idx[0]] = F.softmax_np(leaf)
        single = float(np.abs(hp - flat).max())
        c.detail = f"10000 inputs, max |sum-1| {worst:.1e}; single cluster vs flat {single:.1e}"
        assert worst <= 1e-6
        assert single <= 1e-9


def test_criterion_03_focal_algebra():
    with criterion(3, "focal-loss algebra") as c:
        rng = np.random.default_rng(3)
        p = F.softmax_np(rng.standard_normal((200, 6)))
        t = rng.integers(0, 6, 200)
        ce = -np.mean(np.log(p[np.arange(200), t]))
        gap = abs(F.focal_loss(Tensor(p), t, alpha=1.0, gamma=0.0).item() - ce)
        spot = F.focal_loss(Tensor(np.array([[0.5, 0.5]])), np.array([0]), 0.25, 2.0).item()
        c.detail = f"CE gap {gap:.1e}; p_t=0.5 value {spot:.7f}"
        assert gap <= 1e-12
        assert abs(spot - 0.0433217) <= 1e-7


def test_criterion_04_desk_scale_learning(desk):
    with criterion(4, "desk-scale learning") as c:
        result, seconds, test = desk
        acc = balanced_accuracy(result.model, test.records)
        epochs = len(result.log)
        c.detail = (f"balanced acc {acc:.4f} on {len(test.records)} names; {epochs} epochs; {seconds:.0f}s on "
                    f"{hardware_threads()} core(s); frozen checks {result.frozen_checks}")
        assert acc >= 0.95
        assert epochs <= 30
        assert seconds <= 600
        assert result.frozen_checks and all(result.frozen_checks.values())


def test_criterion_05_accumulation_equivalence():
    with criterion(5, "gradient-accumulation equivalence") as c:
        tax = Taxonomy.grouped(2, 2)
        recs = synth_corpus(tax, 16, seed=5)
        vocab = Vocab.from_characters(r.raw for r in recs)
        cfg = ModelConfig(embed_dim=8, vocab_size=len(vocab), max_len=16, kernel_sizes=(1, 2, 3),
                          filter_counts=(6, 6, 6), groups=2, num_clusters=2, dtype="float64", seed=5)
        models = []
        for micro, steps in ((64, 1), (16, 4), (8, 8)):
            t = Trainer(OnomasCNN(cfg, tax, vocab), recs, recs[:8], StagePlan.progressive((1, 1, 2)),
                        OptimConfig(micro_batch=micro, accumulation_steps=steps), AugmentConfig(seed=9))
            models.append(t.fit().model)
        diff = max(
            float(np.abs(models[0].params[n].data - m.params[n].data).max())
            for m in models[1:] for n in models[0].params
        )
        c.detail = f"64x1 vs 16x4 vs 8x8 over 4 epochs: max-abs diff {diff:.1e}"
        assert diff < 1e-6


def test_criterion_06_metric_oracles():
    with criterion(6, "metric oracles") as c:
        rng = np.random.default_rng(6)
        failures = Counter()
        for _ in range(1000):
            failures.update(check_metrics_against_oracles(*metric_trial(rng)))
        c.detail = f"1000 trials of <=20 samples; disagreements {dict(failures) or 0}"
        assert not failures


def test_criterion_07_quantization(desk, default_pair, default_bench):
    with criterion(7, "int8 quantization") as c:
        result, _, test = desk
        model, qdefault, _ = default_pair
        excess = []
        for float_model, q in ((result.model, quantize_weights(result.model)), (model, qdefault)):
            for name, qt in q.qweights.items():
                w = float_model.params[name].data.astype(np.float64)
                s = qt.scale.astype(np.float64).reshape((-1,) + (1,) * (w.ndim - 1))
                excess.append(float((np.abs(w - qt.q.astype(np.float64) * s) - s / 2).max()))
        qdesk = quantize_weights(result.model)
        acc_f = balanced_accuracy(result.model, test.records)
        acc_q = balanced_accuracy(qdesk, test.records)
        fl, q8 = default_bench
        ratio = speedup(q8, fl, 256)
        c.detail = (f"round-trip max excess over scale/2 {max(excess):.1e}; accuracy float {acc_f:.4f} "
                    f"int8 {acc_q:.4f}; batch-256 speedup {ratio:.2f}x ({q8.label}/{fl.label}, default config)")
        assert max(excess) <= 0.0
        assert abs(acc_f - acc_q) <= 0.01
        assert ratio >= 1.3


def test_criterion_08_serialization(tmp_path):
    with criterion(8, "serialization") as c:
        m = OnomasCNN(ModelConfig(vocab_size=300, num_clusters=2), Taxonomy.grouped(4, 2))
        store.save(m, tmp_path / "m.onmx")
        back = store.load(tmp_path / "m.onmx")
        same = all(p.data.tobytes() == back.params[n].data.tobytes() and p.data.dtype == back.params[n].data.dtype
                   for n, p in m.params.items()) and set(m.params) == set(back.params)
        blob = store.encode(store.model_file(tiny_model(8, dtype="float32")))
        rng = np.random.default_rng(8)
        missed = 0
        for _ in range(1000):
            bad = bytearray(blob)
            bad[int(rng.integers(0, len(blob)))] ^= int(rng.integers(1, 256))
            try:
                store.decode(bytes(bad))
                missed += 1
            except store.ModelFileError:
                pass

        tax = Taxonomy.grouped(2, 2)
        recs = synth_corpus(tax, 12, seed=8)
        vocab = Vocab.from_characters(r.raw for r in recs)
        cfg = ModelConfig(embed_dim=8, vocab_size=len(vocab), max_len=16, kernel_sizes=(1, 3),
                          filter_counts=(6, 6), groups=2, num_clusters=2, seed=8)

        def trainer():
            return Trainer(OnomasCNN(cfg, tax, vocab), recs, recs[:16], StagePlan.progressive((2, 2, 2)),
                           OptimConfig(micro_batch=16), AugmentConfig(seed=8))

        full = trainer().fit().model.fingerprint()
        resumed = []
        for k in (1, 3, 4):
            ck = tmp_path / f"ck{k}.onmx"
            trainer().fit(checkpoint=ck, stop_after_epochs=k)
            t = trainer()
            t.resume(ck)
            resumed.append(t.fit(checkpoint=ck).model.fingerprint() == full)
        c.detail = (f"round trip bitwise {same}; corruptions missed {missed}/1000; "
                    f"resume after epochs 1,3,4 bit-identical {resumed}")
        assert same
        assert missed == 0
        assert all(resumed)


def test_criterion_09_split_and_augmentation():
    with criterion(9, "split and augmentation contracts") as c:
        rng = np.random.default_rng(9)
        worst_dev, overlaps = 0.0, 0
        for trial in range(100):
            n_classes = int(rng.integers(1, 7))
            recs = [NameRecord(f"n{k}-{i}", f"l{k % 3}", ("person", "organization", "location", "other")[k % 4])
                    for k in range(n_classes) for i in range(int(rng.integers(4, 80)))]
            recs += [recs[int(i)] for i in rng.integers(0, len(recs), 3)]
            raw = rng.uniform(0.05, 1.0, 4)
            fr = list(raw / raw.sum())
            fr[0] = 1.0 - sum(fr[1:])
            spec = SplitSpec(*fr, seed=trial)
            parts = stratified_split(recs, spec).as_tuple()
            keys = [{r.key for r in p} for p in parts]
            overlaps += sum(len(keys[i] & keys[j]) for i in range(4) for j in range(i + 1, 4))
            assert sum(len(p) for p in parts) == len({r.key for r in recs})
            uniq = {r.key: r for r in recs}.values()
            for cls, n in Counter((r.language, r.entity_type) for r in uniq).items():
                for part, f in zip(parts, spec.fractions):
                    got = sum(1 for r in part if (r.language, r.entity_type) == cls)
                    worst_dev = max(worst_dev, abs(got - n * f))
        cfg = AugmentConfig(seed=11)
        rec = NameRecord("Maria Lopez", "es", "person")
        hits, mutated = Counter(), 0
        n = 100_000
        for uid in range(n):
            out, trace = augment_trace(rec, cfg, record_rng(11, 0, uid))
            hits.update({t[0] for t in trace})
            mutated += (out.language, out.entity_type) != ("es", "person")
        for uid in range(2000):
            other = NameRecord(f"x{uid} Org", "de", "organization")
            out = augment(other, AugmentConfig(1.0, 1.0, 1.0), record_rng(3, 0, uid))
            mutated += (out.language, out.entity_type) != ("de", "organization")
        rates = {k: hits[k] / n for k in ("case", "title", "noise")}
        want = {"case": 0.30, "title": 0.20, "noise": 0.10}
        c.detail = (f"100 corpora: overlaps {overlaps}, worst class deviation {worst_dev:.2f}; "
                    f"rates {', '.join(f'{k} {v:.4f}' for k, v in rates.items())}; labels mutated {mutated}")
        assert overlaps == 0
        assert worst_dev <= 1.0
        assert all(abs(rates[k] - want[k]) <= 0.01 for k in want)
        assert mutated == 0


def test_criterion_10_throughput_ordering(default_pair, default_bench):
    with criterion(10, "throughput ordering") as c:
        model, _, names = default_pair
        fl, q8 = default_bench
        b1, b256 = fl.cell(1).samples_per_second, fl.cell(256).samples_per_second
        hw = hardware_threads()
        detail = f"float batch 1 {b1:.0f}/s, batch 256 {b256:.0f}/s; int8 {q8.cell(1).samples_per_second:.0f}/s " \
                 f"vs {q8.cell(256).samples_per_second:.0f}/s"
        if hw >= 4:
            rep = bench_run(model, names, batch_sizes=(256,), threads=(1, 4), min_samples=768, latency_samples=5)
            eff = rep.scaling(256)[4]["efficiency"]
            c.detail = f"{detail}; 4-thread efficiency {eff:.2f}"
            assert eff >= 0.6
        else:
            c.detail = f"{detail}; 4-thread scaling not applicable: {hw} hardware thread(s)"
        assert b256 > b1
        assert q8.cell(256).samples_per_second > q8.cell(1).samples_per_second
