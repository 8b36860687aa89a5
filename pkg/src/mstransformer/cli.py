"""Command-line entry point: ``mstransformer <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
numerical failure. Every subcommand writes ``manifest.json`` into its output
directory; ``replay`` re-runs a manifest and compares the recorded metrics.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .attention import parse_scales
from .config import ConfigError, dump, load_config
from .manifest import RunManifest
from .model import Model, ModelConfig
from .planner import describe_plan, plan_records, plan_scales
from .training import MetricsLog, TrainConfig, TrainingDiverged, evaluate, train

log = logging.getLogger("mstransformer")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _csv_list(cast):
    def parse(text: str):
        try:
            return tuple(cast(p) for p in text.split(",") if p.strip())
        except ValueError:
            raise argparse.ArgumentTypeError(f"cannot parse list {text!r}") from None
    return parse


def _scales_arg(text: str) -> str:
    try:
        parse_scales(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return text


# -- plan ----------------------------------------------------------------------

def cmd_plan(args, manifest: RunManifest) -> int:
    if args.heads < 1:
        raise UsageError("--heads must be >= 1")
    if args.layers < 1:
        raise UsageError("--layers must be >= 1")
    if args.n is not None and args.n < 1:
        raise UsageError("--n must be >= 1")
    plans = plan_scales(args.alpha, args.layers, args.heads, parse_scales(args.scales))
    print(describe_plan(plans, args.n))
    records = plan_records(plans, args.n)
    if args.records:
        print()
        print("\n".join(records))
    path = Path(args.out) / "plan.txt"
    path.write_text("\n".join(records) + "\n")
    manifest.add_output(path)
    manifest.metrics = {
        "fractional": [p.fractional for p in plans],
        "counts": [[c for _, c in p.allocations] for p in plans],
    }
    return EXIT_OK


# -- mirrored summation ----------------------------------------------------------

def cmd_mirrored(args, manifest: RunManifest) -> int:
    from .synthetic import GridSettings, format_table, median_table, run_grid, write_csv

    overrides = {"mirrored": {
        "models": args.models, "ks": args.ks, "seeds": args.seeds, "epochs": args.epochs,
        "lr": args.lr, "n": args.n, "d": args.d, "n_train": args.n_train, "n_test": args.n_test,
        "batch_size": args.batch_size, "d_model": args.d_model, "head_dim": args.head_dim,
        "heads": args.heads, "dtype": args.dtype,
    }}
    cfg = load_config(args.config, {"mirrored": GridSettings}, overrides)
    settings = cfg["mirrored"]
    manifest.config = dump(cfg)
    manifest.seed = settings.seeds[0] if settings.seeds else None
    out = Path(args.out)
    metrics_path = out / "metrics.jsonl"
    with metrics_path.open("w") as mfh:
        metrics = MetricsLog([mfh])
        t0 = time.perf_counter()

        def progress(row):
            print(f"K={row['K']:<3d} {row['model']:<9s} seed={row['seed']} "
                  f"test_mse={row['test_mse']:.5f} ({row['seconds']:.1f}s) {row['status']}",
                  flush=True)

        rows = run_grid(settings, metrics, progress)
    manifest.timings = {"total_seconds": time.perf_counter() - t0,
                        "cells": [{k: r[k] for k in ("K", "model", "seed", "seconds")} for r in rows]}
    medians = median_table(rows)
    print()
    print(format_table(medians))
    write_csv(out / "results.csv", medians)
    write_csv(out / "cells.csv", rows, ("K", "model", "seed", "test_mse", "status"))
    for p in (metrics_path, out / "results.csv", out / "cells.csv"):
        manifest.add_output(p)
    manifest.metrics = {
        "cells": [{k: r[k] for k in ("K", "model", "seed", "test_mse", "status")} for r in rows],
        "medians": medians,
    }
    failed = [r for r in rows if r["status"] != "ok"]
    if failed:
        print(f"{len(failed)} cell(s) failed", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


# -- classification --------------------------------------------------------------

_MODEL_FLAGS = ("kind", "n_layers", "n_heads", "d_model", "head_dim", "alpha", "scales", "dropout",
                "use_positional")
_TRAIN_FLAGS = ("lr", "epochs", "batch_size", "seed", "weight_decay", "clip_norm")


def cmd_classify(args, manifest: RunManifest) -> int:
    from . import textdata as td

    out = Path(args.out)
    if args.keyword_task is not None:
        if args.keyword_task < 1:
            raise UsageError("--keyword-task needs a positive training size")
        data_dir = out / "data"
        data_dir.mkdir(parents=True, exist_ok=True)
        n_eval = max(1, args.keyword_task // 4)
        splits = {"train": td.keyword_task(args.keyword_task, args.data_seed),
                  "dev": td.keyword_task(n_eval, args.data_seed + 1),
                  "test": td.keyword_task(n_eval, args.data_seed + 2)}
        for name, corpus in splits.items():
            td.write_tsv(data_dir / f"{name}.tsv", corpus)
            manifest.add_output(data_dir / f"{name}.tsv")
    else:
        if args.train is None or args.test is None:
            raise UsageError("classify needs --train and --test (or --keyword-task N)")
        splits = {"train": td.read_tsv(args.train), "test": td.read_tsv(args.test)}
        splits["dev"] = td.read_tsv(args.dev) if args.dev else splits["train"]

    vocab = td.Vocab.build(splits["train"])
    labels = td.LabelSet.build(splits["train"], splits["dev"], splits["test"])
    longest = max(len(t) for c in splits.values() for t in c.texts)
    overrides = {
        "model": {k: getattr(args, k) for k in _MODEL_FLAGS},
        "train": {k: getattr(args, k) for k in _TRAIN_FLAGS},
    }
    cfg = load_config(args.config, {"model": ModelConfig, "train": TrainConfig}, _with_data(
        overrides, vocab_size=len(vocab), n_classes=max(2, len(labels.names)), max_len=longest + 1))
    mcfg, tcfg = cfg["model"], cfg["train"]
    manifest.config = dump(cfg)
    manifest.seed = tcfg.seed

    ds = {k: td.to_dataset(v, vocab, labels) for k, v in splits.items()}
    model = Model(mcfg, seed=tcfg.seed)
    metrics_path = out / "metrics.jsonl"
    with metrics_path.open("w") as mfh:
        history = train(model, ds["train"], tcfg, eval_set=ds["dev"], metrics=MetricsLog([mfh]))
    test = evaluate(model, ds["test"])
    dev = evaluate(model, ds["dev"])
    best = history[-1].get("best_epoch", 0)
    print(f"labels {labels.names}  vocab {len(vocab)}  train {len(ds['train'])}  "
          f"dev {len(ds['dev'])}  test {len(ds['test'])}")
    for h in history:
        loss = "-" if h["train_loss"] is None else f"{h['train_loss']:.4f}"
        print(f"epoch {h['epoch']:3d}  train_loss {loss:>8s}  dev_acc {h['accuracy']:.4f}")
    print(f"best epoch {best}: dev accuracy {dev['accuracy']:.4f}  test accuracy {test['accuracy']:.4f}")

    ckpt = out / "checkpoint"
    model.save(ckpt)
    vocab.save(ckpt / "vocab.json")
    (ckpt / "labels.json").write_text(json.dumps(labels.names) + "\n")
    for p in (metrics_path, ckpt / "manifest.json", ckpt / "params.bin", ckpt / "vocab.json",
              ckpt / "labels.json"):
        manifest.add_output(p)
    manifest.metrics = {"history": history, "best_epoch": best, "dev_accuracy": dev["accuracy"],
                        "test_accuracy": test["accuracy"], "test_loss": test["loss"]}
    return EXIT_OK


def _with_data(overrides: dict, **model_values) -> dict:
    merged = {s: dict(v) for s, v in overrides.items()}
    merged["model"].update(model_values)
    return merged


# -- probe ---------------------------------------------------------------------

def cmd_probe(args, manifest: RunManifest) -> int:
    from . import probe

    sources = [args.checkpoint is not None, args.dump is not None]
    if sum(sources) != 1:
        raise UsageError("probe needs exactly one of --checkpoint or --dump")
    out = Path(args.out)
    if args.dump is not None:
        report = probe.probe_dump(args.dump)
        manifest.config = {"dump": str(args.dump)}
    else:
        model = Model.load(args.checkpoint)
        corpus = _probe_corpus(args, model)
        report = probe.probe_model(model, corpus)
        manifest.config = {"checkpoint": str(args.checkpoint), "corpus": args.corpus,
                           "random": args.random, "length": args.length, "seed": args.seed}
        manifest.seed = args.seed
        if args.save_dump:
            path = probe.export_attention(probe.model_maps(model, corpus), out / "attention")
            manifest.add_output(path / "manifest.json")
            manifest.add_output(path / "attention.bin")
    rows = report.histograms(truncate_at_half=not args.no_truncate)
    csv_path = out / "histogram.csv"
    probe.write_histogram_csv(csv_path, rows)
    manifest.add_output(csv_path)
    for layer in report.layers:
        pct = [r["percentage"] for r in rows if r["layer"] == layer and r["head"] == probe.ALL_HEADS]
        shown = " ".join(f"{p:5.1f}" for p in pct[:12])
        print(f"layer {layer}: % of edges at distance 0,1,2,...: {shown}{' ...' if len(pct) > 12 else ''}")
    violations = [
        (key, int(report.head_distances(*key).max()), w)
        for key, w in sorted(report.widths.items())
        if key in report.distances and report.head_distances(*key).max() > (w - 1) // 2
    ]
    manifest.metrics = {"histogram": rows, "locality_violations": len(violations)}
    if violations:
        for (layer, head), dist, w in violations:
            print(f"layer {layer} head {head}: distance {dist} exceeds width {w}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _probe_corpus(args, model: Model) -> list:
    c = model.config
    if args.corpus is not None:
        if c.vocab_size == 0:
            raise UsageError("--corpus needs a token model; use --random for vector inputs")
        from .textdata import Vocab
        vocab_path = Path(args.checkpoint) / "vocab.json"
        if not vocab_path.is_file():
            raise ConfigError(f"{vocab_path}: checkpoint has no vocabulary")
        vocab = Vocab.load(vocab_path)
        path = Path(args.corpus)
        if not path.is_file():
            raise FileNotFoundError(f"{path}: corpus not found")
        seqs = []
        for line in path.read_text(encoding="utf-8").splitlines():
            text = line.split("\t", 1)[-1].split()
            if text:
                seqs.append(vocab.encode(text)[None, :])
        if not seqs:
            raise ConfigError(f"{path}: corpus is empty")
        return seqs
    if args.random is None:
        raise UsageError("probe --checkpoint needs --corpus FILE or --random COUNT")
    if args.random < 1 or args.length < 1:
        raise UsageError("--random and --length must be positive")
    rng = np.random.default_rng(args.seed)
    if c.vocab_size > 0:
        return [rng.integers(0, c.vocab_size, (1, args.length)) for _ in range(args.random)]
    return [rng.random((1, args.length, c.input_dim)) for _ in range(args.random)]


# -- gradcheck -------------------------------------------------------------------

def cmd_gradcheck(args, manifest: RunManifest) -> int:
    from .verify import TOLERANCE, registered, run_suite

    try:
        registered(args.scope)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    manifest.config = {"scope": args.scope, "tolerance": TOLERANCE}
    manifest.seed = args.seed
    results, seconds, failed = [], {}, 0
    t0 = time.perf_counter()
    for r in run_suite(args.scope, args.seed):
        status = "PASS" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status} {r.scope}/{r.name}  rel_err={r.error:.3e}  ({r.seconds:.2f}s)", flush=True)
        results.append({"scope": r.scope, "name": r.name, "error": r.error, "passed": r.passed})
        seconds[r.name] = r.seconds
    print(f"{len(results) - failed}/{len(results)} checks within {TOLERANCE:g}")
    manifest.metrics = {"checks": results, "failed": failed}
    manifest.timings = {"total_seconds": time.perf_counter() - t0,
                        "checks": seconds}
    return EXIT_RUNTIME if failed else EXIT_OK


# -- bench -----------------------------------------------------------------------

def cmd_bench(args, manifest: RunManifest) -> int:
    if not args.lengths or min(args.lengths) < 1:
        raise UsageError("--lengths needs positive integers")
    if args.repeats < 1 or args.batch < 1:
        raise UsageError("--repeats and --batch must be positive")
    vocab = 100
    base = ModelConfig(n_layers=args.layers, n_heads=args.heads, d_model=args.d_model,
                       head_dim=args.head_dim, vocab_size=vocab, max_len=max(args.lengths) + 1,
                       dtype="float32")
    models = {"ms": Model(base, seed=args.seed),
              "vanilla": Model(replace(base, kind="vanilla", use_positional=True), seed=args.seed)}
    manifest.config = {"model": asdict(base), "lengths": list(args.lengths), "batch": args.batch,
                       "repeats": args.repeats}
    manifest.seed = args.seed
    rng = np.random.default_rng(args.seed)
    rows = []
    for n in args.lengths:
        batch = rng.integers(0, vocab, (args.batch, n))
        for name, model in models.items():
            model.forward(batch)  # warm-up, includes kernel compilation
            times = []
            for _ in range(args.repeats):
                t0 = time.perf_counter()
                model.forward(batch)
                times.append(time.perf_counter() - t0)
            rows.append({"model": name, "n": n, "seconds": float(np.median(times))})
    print(f"{'N':>6s} {'ms':>12s} {'vanilla':>12s}   (median seconds per forward batch of {args.batch})")
    for n in args.lengths:
        t = {r["model"]: r["seconds"] for r in rows if r["n"] == n}
        print(f"{n:6d} {t['ms']:12.5f} {t['vanilla']:12.5f}")
    path = Path(args.out) / "bench.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "n", "seconds"])
        w.writerows([r["model"], r["n"], repr(r["seconds"])] for r in rows)
    manifest.add_output(path)
    # wall-clock times are not reproducible, so they live under timings
    manifest.timings = {"rows": rows}
    manifest.metrics = {"lengths": list(args.lengths), "models": list(models)}
    return EXIT_OK


# -- replay ----------------------------------------------------------------------

def cmd_replay(args, manifest: RunManifest) -> int:
    old = RunManifest.read(args.manifest)
    target = Path(args.out).resolve()
    argv = _strip_out(old.argv) + ["--out", str(target)]
    print(f"replaying: mstransformer {' '.join(argv)}")
    with _chdir(old.cwd or "."):
        code = main(argv)
        new = RunManifest.read(target / "manifest.json")
    manifest.config = {"replayed": str(args.manifest), "argv": argv}
    same = _canon(new.metrics) == _canon(old.metrics)
    manifest.metrics = {"reproduced": same, "exit_code": code}
    if same:
        print("metrics reproduced bit-for-bit")
        return EXIT_OK
    print("metrics differ from the recorded run", file=sys.stderr)
    for key in sorted(set(old.metrics) | set(new.metrics)):
        if _canon(old.metrics.get(key)) != _canon(new.metrics.get(key)):
            print(f"  {key}: differs", file=sys.stderr)
    return EXIT_RUNTIME


def _strip_out(argv: Sequence[str]) -> list[str]:
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        if a == "--out":
            skip = True
            continue
        if a.startswith("--out="):
            continue
        out.append(a)
    return out


def _canon(obj) -> str:
    return json.dumps(obj, sort_keys=True)


@contextlib.contextmanager
def _chdir(path):
    prev = os.getcwd()
    os.chdir(path)
    try:
        yield
    finally:
        os.chdir(prev)


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mstransformer", description="Multi-scale Transformer experiments and tools.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=None,
                   help="upper bound on BLAS threads (results do not depend on it)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--out", default=None, help=f"output directory (default runs/{name})")
        return sp

    sp = add("plan", "Per-layer head allocation over scale candidates.")
    sp.add_argument("--alpha", type=float, default=0.0)
    sp.add_argument("--layers", type=int, default=3)
    sp.add_argument("--heads", type=int, default=10)
    sp.add_argument("--scales", type=_scales_arg, default="1,3,N/16,N/8,N/4")
    sp.add_argument("--n", type=int, default=None, help="sequence length used to resolve widths")
    sp.add_argument("--records", action="store_true", help="also print key=value records")

    sp = add("mirrored", "Mirrored-summation experiment: test MSE per model and K.")
    sp.add_argument("--config", default=None, help="INI file with a [mirrored] section")
    sp.add_argument("--models", type=_csv_list(str), default=None)
    sp.add_argument("--ks", type=_csv_list(int), default=None)
    sp.add_argument("--seeds", type=_csv_list(int), default=None)
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--lr", type=float, default=None)
    sp.add_argument("--n", type=int, default=None)
    sp.add_argument("--d", type=int, default=None)
    sp.add_argument("--n-train", type=int, default=None)
    sp.add_argument("--n-test", type=int, default=None)
    sp.add_argument("--batch-size", type=int, default=None)
    sp.add_argument("--d-model", type=int, default=None)
    sp.add_argument("--head-dim", type=int, default=None)
    sp.add_argument("--heads", type=int, default=None)
    sp.add_argument("--dtype", choices=("float32", "float64"), default=None)

    sp = add("classify", "Train and evaluate a sentence classifier on TSV data.")
    sp.add_argument("--config", default=None, help="INI file with [model] and [train] sections")
    sp.add_argument("--train")
    sp.add_argument("--dev")
    sp.add_argument("--test")
    sp.add_argument("--keyword-task", type=int, default=None, metavar="N",
                    help="generate the synthetic keyword task with N training sentences")
    sp.add_argument("--data-seed", type=int, default=0)
    sp.add_argument("--kind", choices=("ms", "vanilla"), default=None)
    sp.add_argument("--layers", dest="n_layers", type=int, default=None)
    sp.add_argument("--heads", dest="n_heads", type=int, default=None)
    sp.add_argument("--d-model", type=int, default=None)
    sp.add_argument("--head-dim", type=int, default=None)
    sp.add_argument("--alpha", type=float, default=None)
    sp.add_argument("--scales", type=_scales_arg, default=None)
    sp.add_argument("--dropout", type=float, default=None)
    sp.add_argument("--use-positional", choices=("true", "false"), default=None)
    sp.add_argument("--lr", type=float, default=None)
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--batch-size", type=int, default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--weight-decay", type=float, default=None)
    sp.add_argument("--clip-norm", type=float, default=None)

    sp = add("probe", "Attention-edge distance histograms for a checkpoint or an attention dump.")
    sp.add_argument("--checkpoint")
    sp.add_argument("--dump", help="directory holding an attention dump")
    sp.add_argument("--corpus", help="text or TSV file, one sentence per line")
    sp.add_argument("--random", type=int, default=None, metavar="COUNT",
                    help="probe COUNT random sequences instead of a corpus")
    sp.add_argument("--length", type=int, default=32, help="length of random sequences")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--no-truncate", action="store_true",
                    help="one bucket per distance instead of pooling beyond N/2")
    sp.add_argument("--save-dump", action="store_true", help="also export the attention maps")

    sp = add("gradcheck", "Finite-difference check of every op, layer and model.")
    sp.add_argument("--scope", default="all", help="all, ops, attention, layers or model")
    sp.add_argument("--seed", type=int, default=0)

    sp = add("bench", "Forward-pass timing of the multi-scale and vanilla encoders.")
    sp.add_argument("--lengths", type=_csv_list(int), default=(32, 128, 512))
    sp.add_argument("--batch", type=int, default=8)
    sp.add_argument("--repeats", type=int, default=3)
    sp.add_argument("--layers", type=int, default=2)
    sp.add_argument("--heads", type=int, default=10)
    sp.add_argument("--d-model", type=int, default=40)
    sp.add_argument("--head-dim", type=int, default=4)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("replay", "Re-run a recorded manifest and compare its metrics.")
    sp.add_argument("manifest")
    return p


COMMANDS = {
    "plan": cmd_plan,
    "mirrored": cmd_mirrored,
    "classify": cmd_classify,
    "probe": cmd_probe,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
    "replay": cmd_replay,
}


def _limit_threads(n: Optional[int]):
    if n is None:
        return contextlib.nullcontext()
    if n < 1:
        raise UsageError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "use_positional", None) is not None:
        args.use_positional = args.use_positional == "true"
    if args.out is None:
        args.out = str(Path("runs") / args.command)
    manifest = RunManifest(command=args.command, argv=argv, config={}, seed=None, cwd=os.getcwd())
    try:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        with _limit_threads(args.threads):
            code = COMMANDS[args.command](args, manifest)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        code = EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - report, do not traceback
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        code = EXIT_RUNTIME
    manifest.metrics.setdefault("exit_code", code)
    manifest.write(Path(args.out) / "manifest.json")
    return code
