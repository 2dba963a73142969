"""``onomas`` command line: synth, train, eval, predict, quantize, bench.

Every subcommand accepts ``--config FILE`` (flat ``key=value`` lines, keys
spelled like the long flags) and ``--seed``. Flags given on the command line
override the file. Exit codes: 0 ok, 1 usage, 2 data error, 3 model-file
error, 4 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MODEL, EXIT_RUNTIME = 0, 1, 2, 3, 4

log = logging.getLogger("onomas")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class ModelError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in str(text).replace(" ", "").split(",") if t)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def read_config(path: str | Path) -> dict[str, str]:
    """Flat ``key=value`` text; ``#`` starts a comment, blank lines are ignored."""
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value file; command-line flags override it")
    p.add_argument("--seed", type=int, default=0, help="single seed for every random choice (default 0)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="onomas", description="Character-level CNN name classifier.")
    parser.add_argument("--version", action="version", version=f"onomas {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="write a synthetic labelled corpus (name, language, type TSV)")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--langs", type=int, default=4)
    p.add_argument("--clusters", type=int, default=2)
    p.add_argument("--per-class", type=int, default=500)
    p.add_argument("--sample-seed", type=int, help="draw fresh names of the same languages (default: --seed)")

    p = sub.add_parser("train", help="train a model with the three-stage curriculum")
    _common(p)
    p.add_argument("--train", required=True, help="training corpus TSV")
    p.add_argument("--val", help="validation TSV (default: a stratified share of --train)")
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--clusters", type=int, default=2)
    p.add_argument("--embed-dim", type=int, default=384)
    p.add_argument("--max-len", type=int, default=50)
    p.add_argument("--kernel-sizes", type=_int_list, default=(1, 2, 3, 4, 5))
    p.add_argument("--filters", type=_int_list, default=(128, 152, 181, 215, 256))
    p.add_argument("--groups", type=int, default=8)
    p.add_argument("--embed-dropout", type=float, default=0.05)
    p.add_argument("--head-dropout", type=float, default=0.5)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.add_argument("--epochs", type=_int_list, default=(10, 10, 10), help="per stage: cluster,leaf,joint")
    p.add_argument("--peak-lr", type=float, default=3e-3)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--clip-norm", type=float, default=1.0)
    p.add_argument("--micro-batch", type=int, default=64)
    p.add_argument("--accumulation-steps", type=int, default=1)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--checkpoint", help="checkpoint file; resumed from when it exists")
    p.add_argument("--log", help="per-epoch TSV log")

    p = sub.add_parser("eval", help="score a model on a labelled TSV and write report files")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", help="report prefix (default: next to --test)")
    p.add_argument("--bins", type=int, default=15)
    p.add_argument("--top-k", type=int, default=10)

    p = sub.add_parser("predict", help="label one name per input line")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True, help="names, one per line ('-' for stdin)")
    p.add_argument("--out", default="-", help="TSV output: name, language, type, confidence")

    p = sub.add_parser("quantize", help="convert a float model file to int8")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("bench", help="measure throughput and latency (with an energy proxy)")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--names", help="input names, one per line (default: random strings)")
    p.add_argument("--compare", help="second model file benchmarked on the same cells")
    p.add_argument("--vs-quantized", action="store_true", help="also bench an int8 twin of --model")
    p.add_argument("--batches", type=_int_list, default=(1, 8, 32, 128, 256, 1024))
    p.add_argument("--threads", type=_int_list, default=(1,))
    p.add_argument("--iterations", type=int)
    p.add_argument("--min-samples", type=int, default=1024)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--watts-per-core", type=float, default=10.0)
    p.add_argument("--latency-samples", type=int, default=200)
    p.add_argument("--out", help="report prefix for .tsv and .json files")
    return parser


def _config_path(argv: Sequence[str]) -> str | None:
    for i, a in enumerate(argv):
        if a == "--config":
            if i + 1 >= len(argv):
                raise UsageError("--config needs a file argument")
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    path = _config_path(argv)
    command = next((a for a in argv if not a.startswith("-")), None)
    subs = parser._subparsers._group_actions[0].choices  # type: ignore[union-attr]
    if path and command in subs:
        sub = subs[command]
        known = {}
        for a in sub._actions:
            if a.dest in ("help", "config"):
                continue
            known[a.dest] = a
            for opt in a.option_strings:
                known[opt.lstrip("-").replace("-", "_")] = a
        defaults = {}
        for key, raw in read_config(path).items():
            if key not in known:
                raise UsageError(f"{path}: unknown key {key!r} for '{command}'")
            action = known[key]
            key = action.dest
            if isinstance(action, argparse._StoreTrueAction):
                defaults[key] = raw.lower() in ("1", "true", "yes", "on")
                continue
            try:
                defaults[key] = action.type(raw) if action.type else raw
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"{path}: bad value for {key}: {exc}") from None
            if action.choices and defaults[key] not in action.choices:
                raise UsageError(f"{path}: {key} must be one of {sorted(action.choices)}")
            action.required = False  # satisfied by the file
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# ------------------------------------------------------------------ helpers


def _read_records(path: str):
    from .data import CorpusError, read_tsv

    try:
        return read_tsv(path)
    except FileNotFoundError as exc:
        raise DataError(f"no such file: {path}") from exc
    except (CorpusError, UnicodeDecodeError) as exc:
        raise DataError(str(exc)) from exc


def _load_model(path: str):
    from . import store

    try:
        return store.load(path)
    except FileNotFoundError as exc:
        raise ModelError(f"no such model file: {path}") from exc
    except store.ModelFileError as exc:
        raise ModelError(f"{path}: {exc}") from exc


def _read_lines(path: str) -> list[str]:
    try:
        if path == "-":
            text = sys.stdin.read()
        else:
            text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise DataError(f"no such file: {path}") from exc
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: not UTF-8") from exc
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return [ln.rstrip("\r") for ln in lines]


def _random_names(vocab, n: int, seed: int) -> list[str]:
    chars = [t for t in vocab.to_lines()[4:] if len(t) == 1 and t.isprintable() and not t.isspace()]
    if not chars:
        chars = list("abcdefghijklmnopqrstuvwxyz")
    rng = np.random.default_rng([seed, 0xBE7C])
    out = []
    for _ in range(n):
        words = [
            "".join(rng.choice(chars, size=rng.integers(3, 10))) for _ in range(rng.integers(1, 4))
        ]
        out.append(" ".join(words))
    return out


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    from .data import synth_corpus, write_tsv
    from .taxonomy import Taxonomy, TaxonomyError

    try:
        tax = Taxonomy.grouped(args.langs, min(args.clusters, args.langs))
    except TaxonomyError as exc:
        raise UsageError(str(exc)) from exc
    if args.per_class < 1:
        raise UsageError("--per-class must be >= 1")
    records = synth_corpus(tax, args.per_class, seed=args.seed, sample_seed=args.sample_seed)
    n = write_tsv(records, args.out)
    log.info("wrote %d records to %s", n, args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    from . import store
    from .data import AugmentConfig, SplitSpec, Vocab, class_weights, stratified_split, taxonomy_from_records
    from .model import ModelConfig, OnomasCNN
    from .nn import ConfigError
    from .train import OptimConfig, StagePlan, train

    records = _read_records(args.train)
    if not records:
        raise DataError(f"{args.train}: no records")
    tax = taxonomy_from_records(records, args.clusters)
    if args.val:
        val = _read_records(args.val)
        try:
            for r in val:
                r.class_id(tax)
        except ValueError as exc:
            raise DataError(f"{args.val}: {exc}") from exc
        train_records = records
    else:
        if not 0.0 < args.val_fraction < 1.0:
            raise UsageError("--val-fraction must be in (0, 1)")
        spec = SplitSpec(1.0 - args.val_fraction, args.val_fraction, 0.0, 0.0, seed=args.seed)
        splits = stratified_split(records, spec, tax)
        train_records, val = splits.train, splits.val_a
    vocab = Vocab.from_characters(r.raw for r in train_records)
    if len(args.epochs) != 3:
        raise UsageError("--epochs takes three values: cluster,leaf,joint")
    try:
        config = ModelConfig(
            embed_dim=args.embed_dim,
            vocab_size=len(vocab),
            max_len=args.max_len,
            kernel_sizes=args.kernel_sizes,
            filter_counts=args.filters,
            groups=args.groups,
            embed_dropout=args.embed_dropout,
            head_dropout=args.head_dropout,
            num_clusters=tax.n_clusters,
            dtype=args.dtype,
            seed=args.seed,
        )
        optim = OptimConfig(
            peak_lr=args.peak_lr,
            weight_decay=args.weight_decay,
            clip_norm=args.clip_norm,
            micro_batch=args.micro_batch,
            accumulation_steps=args.accumulation_steps,
            seed=args.seed,
        )
        augment = None if args.no_augment else AugmentConfig(seed=args.seed)
    except (ConfigError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    model = OnomasCNN(config, tax, vocab)
    resume = args.checkpoint if args.checkpoint and Path(args.checkpoint).exists() else None
    weights = class_weights(train_records, tax)
    kwargs = dict(patience=args.patience, seed=args.seed, class_weights=weights, checkpoint=args.checkpoint, log_path=args.log)
    plan = StagePlan.progressive(tuple(args.epochs))
    if resume:
        from .train import Trainer

        trainer = Trainer(
            model, train_records, val, plan, optim, augment, class_weights=weights, patience=args.patience, seed=args.seed
        )
        try:
            trainer.resume(resume)
        except store.ModelFileError as exc:
            raise ModelError(f"{resume}: {exc}") from exc
        result = trainer.fit(checkpoint=args.checkpoint, log_path=args.log)
    else:
        result = train(model, train_records, val, plan, optim, augment, **kwargs)
    size = store.save(result.model, args.out)
    print(result.summary())
    log.info("wrote %s (%d bytes)", args.out, size)
    return EXIT_OK if not result.interrupted else EXIT_RUNTIME


def cmd_eval(args) -> int:
    from .metrics import evaluate
    from .model import predict

    model = _load_model(args.model)
    records = _read_records(args.test)
    if not records:
        raise DataError(f"{args.test}: no records")
    try:
        targets = np.array([r.class_id(model.taxonomy) for r in records])
    except ValueError as exc:
        raise DataError(f"{args.test}: {exc}") from exc
    preds = predict(model, [r.raw for r in records], with_distribution=True)
    bad = [p for p in preds if not p.ok]
    if bad:
        raise DataError(f"{args.test}: {len(bad)} names could not be tokenized, first: {bad[0].error}")
    probs = np.stack([p.distribution for p in preds])
    report = evaluate(probs, targets, model.taxonomy, n_bins=args.bins, top_k=args.top_k)
    prefix = args.out or str(Path(args.test).with_suffix("")) + ".eval"
    for path in report.write(prefix):
        log.info("wrote %s", path)
    sys.stdout.write(report.to_kv())
    return EXIT_OK


def _clean(name: str) -> str:
    return name.replace("\t", " ").replace("\r", " ")


def cmd_predict(args) -> int:
    from .model import predict

    model = _load_model(args.model)
    names = _read_lines(args.input)
    rows = []
    for p in predict(model, names):
        if p.ok:
            rows.append(f"{_clean(p.name)}\t{p.language}\t{p.entity_type}\t{p.confidence:.6f}")
        else:
            rows.append(f"{_clean(p.name)}\t\t\terror: {_clean(p.error or '')}")
    text = "".join(r + "\n" for r in rows)
    if args.out == "-":
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text, encoding="utf-8")
    return EXIT_OK


def cmd_quantize(args) -> int:
    from . import store
    from .quant import QuantizedModel, quantize_weights

    model = _load_model(args.model)
    if isinstance(model, QuantizedModel):
        raise ModelError(f"{args.model} is already quantized")
    q = quantize_weights(model)
    size = store.save(q, args.out)
    src = Path(args.model).stat().st_size
    print(f"float_bytes={src}\nquantized_bytes={size}\nratio={src / size:.3f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import bench_run

    model = _load_model(args.model)
    if model.vocab is None:
        raise ModelError(f"{args.model} carries no vocabulary")
    names = _read_lines(args.names) if args.names else _random_names(model.vocab, 4096, args.seed)
    names = [n for n in names if n.strip()]
    if not names:
        raise DataError("no input names")
    if args.reps < 3 or args.warmup < 1:
        raise UsageError("--reps must be >= 3 and --warmup >= 1")
    opts = dict(
        batch_sizes=args.batches,
        threads=args.threads,
        iterations=args.iterations,
        min_samples=args.min_samples,
        reps=args.reps,
        warmup=args.warmup,
        watts_per_core=args.watts_per_core,
        latency_samples=args.latency_samples,
    )
    base_label = "int8" if type(model).__name__ == "QuantizedModel" else "float"
    other = None
    if args.compare:
        other = _load_model(args.compare)
    elif args.vs_quantized:
        from .quant import QuantizedModel, quantize_weights

        if isinstance(model, QuantizedModel):
            raise UsageError("--vs-quantized needs a float model")
        other = quantize_weights(model)
    report = bench_run(model, names, label=base_label, **opts)
    reports = [(report, None)]
    if other is not None:
        label = "int8" if type(other).__name__ == "QuantizedModel" else "float"
        if label == base_label:
            label += "_b"
        reports.append((bench_run(other, names, label=label, **opts), report))
    for rep, cmp in reports:
        sys.stdout.write(f"# {rep.label}\n{rep.to_tsv(cmp)}")
        sys.stdout.write(json.dumps({"latency_ms": rep.latency_ms, "energy_joules_proxy": rep.energy_joules}) + "\n")
        for w in rep.warnings:
            print(f"warning: {w}", file=sys.stderr)
        if args.out:
            rep.write(f"{args.out}.{rep.label}", cmp)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "quantize": cmd_quantize,
    "bench": cmd_bench,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    from .nn import ConfigError
    from .quant import QuantizationError
    from .train import NonFiniteGradient, TrainingError

    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ModelError as exc:
        print(f"model file error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except (TrainingError, NonFiniteGradient, QuantizationError, ConfigError, MemoryError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
