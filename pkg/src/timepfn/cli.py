"""Command-line entry point: ``timepfn <command> [flags]``.

Every command that writes an artifact also writes ``<artifact>.manifest.json``
holding the argv, the fully resolved configuration, seed, paths, version and
wall-clock duration; ``timepfn replay <manifest>`` re-runs it. On failure
partial outputs are removed and the exit code names the failure class.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import as_dict, build, default_workers, read_config, resolve
from .data import Corpus, read_header, write_corpus
from .errors import (
    ContextTooShort, CorpusFormatError, DivergedLoss, FactorizationFailed, NonFiniteParameter,
    ParseError, ShapeMismatch, WindowTooLong,
)
from .evaluation import (
    BASELINES, baseline_forecaster, evaluate, format_table, load_benchmark_csv,
    model_forecaster, read_numeric_csv, sliding_windows, univariate_protocol, write_records,
)
from .kernels import KernelBankConfig
from .lmc import LmcConfig, generate_corpus
from .model import ModelConfig, TimePFN, forecast_split, load_checkpoint, read_checkpoint, save_checkpoint
from .optim import TrainConfig
from .train import finetune, train

log = logging.getLogger("timepfn")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_PARSE = 3
EXIT_SHAPE = 4
EXIT_IO = 5
EXIT_DIVERGED = 6
EXIT_NUMERIC = 7


class UsageError(Exception):
    pass


def _split_arg(text: str):
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("split needs three comma-separated values")
    if all(p.isdigit() for p in parts):
        return tuple(int(p) for p in parts)
    return tuple(float(p) for p in parts)


def _budget_arg(text: str):
    return "all" if text.lower() == "all" else int(text)


def _flags(args, mapping: dict) -> dict:
    """Pick set flags from ``args``; ``mapping`` is flag attr -> config field."""
    return {field: getattr(args, attr) for attr, field in mapping.items()
            if getattr(args, attr, None) is not None}


def _write_manifest(out: Path, args, argv, resolved: dict, started: float, inputs=()):
    manifest = {
        "command": args.command,
        "argv": list(argv),
        "config": resolved,
        "seed": getattr(args, "seed", None),
        "inputs": [str(p) for p in inputs if p],
        "output": str(out),
        "version": __version__,
        "duration_s": round(time.time() - started, 3),
    }
    Path(f"{out}.manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_model(args, config) -> TimePFN:
    if getattr(args, "checkpoint", None):
        return load_checkpoint(args.checkpoint)
    raise UsageError("--checkpoint is required")


def _model_config(args, config) -> ModelConfig:
    flags = _flags(args, {"context_len": "context_len", "horizon": "horizon",
                          "embed_dim": "embed_dim", "num_layers": "num_layers",
                          "num_heads": "num_heads", "train_channels": "train_channels",
                          "dtype": "dtype"})
    return resolve(ModelConfig, config, "model", flags)


def _train_config(args, config, base: TrainConfig | None = None) -> TrainConfig:
    flags = _flags(args, {"lr": "max_lr", "epochs": "epochs", "batch_size": "batch_size",
                          "noise_sigma": "noise_sigma", "seed": "seed", "grad_clip": "grad_clip",
                          "max_steps": "max_steps", "stride": "stride", "optimizer": "optimizer"})
    if getattr(args, "no_curriculum", False):
        flags["curriculum"] = False
    defaults = as_dict(base) if base is not None else None
    return build(TrainConfig, defaults, config.get("train"), flags)


# -- commands ---------------------------------------------------------------


def cmd_generate(args, config, argv, started):
    if args.seed is None:
        raise UsageError("generate requires an explicit --seed (reproducibility policy)")
    flags = _flags(args, {"channels": "N", "length": "T"})
    lmc = resolve(LmcConfig, config, "lmc", flags)
    bank = resolve(KernelBankConfig, config, "kernels")
    workers = args.workers if args.workers is not None else default_workers()
    blocks = generate_corpus(lmc, args.series, args.independent_ratio, args.seed,
                             workers=workers, bank=bank)
    summary = write_corpus(blocks, args.out, channels=lmc.N, length=lmc.T)
    resolved = {"lmc": as_dict(lmc), "kernels": as_dict(bank),
                "series": args.series, "independent_ratio": args.independent_ratio}
    _write_manifest(Path(args.out), args, argv, resolved, started)
    print(f"wrote {summary.series_count} series ({summary.n_correlated} correlated, "
          f"{summary.n_independent} independent) to {args.out} sha256={summary.sha256}")
    return [args.out]


def cmd_train(args, config, argv, started):
    corpus = Corpus(args.corpus)
    mc = _model_config(args, config)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        model = TimePFN(mc)
    tc = _train_config(args, config)

    def progress(step, loss, lr):
        if step % args.log_every == 0:
            log.info("step %d loss %.5f lr %.3g", step, loss, lr)

    try:
        result = train(model, corpus, tc, callback=progress)
    except DivergedLoss as exc:
        model.load_state_dict(exc.last_good_state)
        save_checkpoint(model, f"{args.out}.last-good")
        raise
    save_checkpoint(model, args.out)
    if args.loss_curve:
        np.savetxt(args.loss_curve, np.column_stack([result.lrs, result.losses]),
                   delimiter=",", header="lr,loss", comments="")
    _write_manifest(Path(args.out), args, argv,
                    {"model": as_dict(model.cfg), "train": as_dict(tc)}, started, [args.corpus])
    final = result.losses[-1] if result.losses else float("nan")
    print(f"trained {result.steps} steps; final loss {final:.5f}; "
          f"{model.num_parameters()} parameters; checkpoint {args.out}")
    return [args.out, args.loss_curve]


def cmd_finetune(args, config, argv, started):
    model = _load_model(args, config)
    splits = load_benchmark_csv(args.data, args.split, standardize=args.standardize)
    mc = model.cfg
    contexts, targets = sliding_windows(splits.train.values, mc.context_len, mc.horizon, 1)
    tc = _train_config(args, config, TrainConfig.finetune_defaults())
    result = finetune(model, contexts, targets, args.budget, tc)
    save_checkpoint(model, args.out)
    _write_manifest(Path(args.out), args, argv,
                    {"train": as_dict(tc), "budget": args.budget}, started,
                    [args.checkpoint, args.data])
    print(f"fine-tuned {result.steps} steps on budget {args.budget}; checkpoint {args.out}")
    return [args.out]


def _forecaster(args, horizon):
    if args.baseline:
        return baseline_forecaster(args.baseline, horizon, args.period), args.baseline
    if not args.checkpoint:
        raise UsageError("give --checkpoint or --baseline")
    model = load_checkpoint(args.checkpoint)
    return model_forecaster(model), "timepfn"


def cmd_evaluate(args, config, argv, started):
    splits = load_benchmark_csv(args.data, args.split, standardize=args.standardize)
    if args.checkpoint and not args.baseline:
        cfg, _ = read_checkpoint(args.checkpoint)
        ctx_len, horizon = cfg.context_len, cfg.horizon
    else:
        ctx_len, horizon = args.context_len or 96, args.horizon or 96
    forecaster, name = _forecaster(args, horizon)
    dataset = Path(args.data).stem
    records = []
    if args.protocol == "univariate":
        reports = []
        for j, column in enumerate(splits.columns):
            reports.append((column, univariate_protocol(forecaster, splits.test.values[:, j],
                                                        pad_to=ctx_len)))
        for column, rep in reports:
            for h, r in rep.per_horizon.items():
                records.append(r.record(dataset=dataset, variate=column, model=name,
                                        protocol="univariate", horizon=h, seed=args.seed))
            records.append({"dataset": dataset, "variate": column, "model": name,
                            "protocol": "univariate", "horizon": "avg", "mse": rep.mse,
                            "mae": rep.mae, "seed": args.seed})
    else:
        report = evaluate(forecaster, splits.test.values, ctx_len, horizon, stride=1)
        records.append(report.record(dataset=dataset, model=name, protocol=args.protocol,
                                     budget=args.budget_label, seed=args.seed))
    print(format_table(records))
    if args.out:
        write_records(args.out, records)
        _write_manifest(Path(args.out), args, argv, {"split": list(args.split)}, started,
                        [args.data, args.checkpoint])
        return [args.out]
    return []


def cmd_forecast(args, config, argv, started):
    model = load_checkpoint(args.checkpoint)
    context = _load_matrix(args.context)
    if context.shape[0] != model.cfg.context_len:
        raise ShapeMismatch(
            f"context has {context.shape[0]} rows, model expects {model.cfg.context_len}"
        )
    out = forecast_split(context, model)
    np.savetxt(args.out, out, delimiter=",", fmt="%.9g")
    _write_manifest(Path(args.out), args, argv, {"model": as_dict(model.cfg)}, started,
                    [args.checkpoint, args.context])
    print(f"wrote {out.shape[0]}x{out.shape[1]} forecast to {args.out}")
    return [args.out]


def _load_matrix(path) -> np.ndarray:
    """A plain numeric CSV, or a timestamped CSV with a header row."""
    with open(path) as fh:
        first = fh.readline().strip().split(",")
    try:
        [float(c) for c in first]
    except ValueError:
        return read_numeric_csv(path)[1]
    try:
        return np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from None


def cmd_inspect(args, config, argv, started):
    with open(args.path, "rb") as fh:
        magic = fh.read(4)
    if magic == b"LMCS":
        h = read_header(args.path)
        Corpus(args.path)  # validates the byte length
        print(f"format=corpus\nversion={h.version}\nseries_count={h.series_count}\n"
              f"channels={h.channels}\nlength={h.length}")
    elif magic == b"TPFN":
        cfg, state = read_checkpoint(args.path)
        print("format=checkpoint")
        for k, v in as_dict(cfg).items():
            print(f"{k}={v}")
        print(f"parameters={sum(v.size for v in state.values())}")
        print(f"tensors={len(state)}")
    else:
        raise CorpusFormatError(f"{args.path}: unrecognized file magic {magic!r}")
    return []


def cmd_plotdata(args, config, argv, started):
    splits = load_benchmark_csv(args.data, args.split, standardize=args.standardize)
    if args.checkpoint and not args.baseline:
        cfg, _ = read_checkpoint(args.checkpoint)
        ctx_len, horizon = cfg.context_len, cfg.horizon
    else:
        ctx_len, horizon = 96, 96
    forecaster, _ = _forecaster(args, horizon)
    series = splits.test.values
    start = args.offset
    if start + ctx_len + horizon > len(series):
        raise ShapeMismatch(f"offset {start} leaves no full window in the test split")
    context = series[start:start + ctx_len]
    truth = series[start + ctx_len:start + ctx_len + horizon]
    pred = np.asarray(forecaster(context[None]))[0]
    col = args.variate
    with open(args.out, "w") as fh:
        fh.write("time,truth,forecast\n")
        for t in range(ctx_len):
            fh.write(f"{start + t},{context[t, col]:.9g},\n")
        for h in range(horizon):
            fh.write(f"{start + ctx_len + h},{truth[h, col]:.9g},{pred[h, col]:.9g}\n")
    _write_manifest(Path(args.out), args, argv, {}, started, [args.data, args.checkpoint])
    print(f"wrote plot data for variate {splits.columns[col]} to {args.out}")
    return [args.out]


def cmd_replay(args, config, argv, started):
    manifest = json.loads(Path(args.manifest).read_text())
    return main(manifest["argv"])


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="timepfn", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="key=value config file with [lmc]/[kernels]/[model]/[train]")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a synthetic corpus")
    g.add_argument("--series", type=int, required=True, help="number of correlated series")
    g.add_argument("--length", type=int)
    g.add_argument("--channels", type=int)
    g.add_argument("--independent-ratio", type=float, default=0.25)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.add_argument("--workers", type=int)

    def model_flags(sp):
        sp.add_argument("--context-len", type=int)
        sp.add_argument("--horizon", type=int)
        sp.add_argument("--embed-dim", type=int)
        sp.add_argument("--num-layers", type=int)
        sp.add_argument("--num-heads", type=int)
        sp.add_argument("--train-channels", type=int)
        sp.add_argument("--dtype", choices=("float32", "float64"))

    def train_flags(sp):
        sp.add_argument("--lr", type=float)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--noise-sigma", type=float)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--grad-clip", type=float)
        sp.add_argument("--max-steps", type=int)
        sp.add_argument("--stride", type=int)
        sp.add_argument("--optimizer", choices=("adam", "adamw"))

    def data_flags(sp):
        sp.add_argument("--data", required=True, help="benchmark CSV (timestamp + variates)")
        sp.add_argument("--split", type=_split_arg, default=(0.7, 0.1, 0.2),
                        help="train,val,test as fractions or row counts")
        sp.add_argument("--standardize", action="store_true",
                        help="scale all splits with training-split statistics")

    t = sub.add_parser("train", help="pretrain on a synthetic corpus")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--checkpoint", help="resume from this checkpoint")
    t.add_argument("--loss-curve", help="CSV file for (lr, loss) per step")
    t.add_argument("--log-every", type=int, default=50)
    t.add_argument("--no-curriculum", action="store_true")
    model_flags(t)
    train_flags(t)

    f = sub.add_parser("finetune", help="fine-tune a checkpoint on a CSV dataset")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--budget", type=_budget_arg, default="all")
    data_flags(f)
    train_flags(f)

    e = sub.add_parser("evaluate", help="score a model or baseline on a test split")
    e.add_argument("--checkpoint")
    e.add_argument("--baseline", choices=BASELINES + ("seasonal-naive",))
    e.add_argument("--period", type=int, default=7)
    e.add_argument("--protocol", choices=("zero-shot", "few-shot", "univariate"),
                   default="zero-shot")
    e.add_argument("--budget-label", default=None, help="budget recorded with the metrics")
    e.add_argument("--context-len", type=int)
    e.add_argument("--horizon", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--out", help="append line-delimited JSON records here")
    data_flags(e)

    fc = sub.add_parser("forecast", help="forecast one context CSV")
    fc.add_argument("--checkpoint", required=True)
    fc.add_argument("--context", required=True, help="L x N CSV (optionally timestamped)")
    fc.add_argument("--out", required=True)

    i = sub.add_parser("inspect", help="print a corpus or checkpoint header")
    i.add_argument("path")

    pd = sub.add_parser("plotdata", help="export (time, truth, forecast) CSV for plotting")
    pd.add_argument("--checkpoint")
    pd.add_argument("--baseline", choices=BASELINES + ("seasonal-naive",))
    pd.add_argument("--period", type=int, default=7)
    pd.add_argument("--offset", type=int, default=0, help="window start within the test split")
    pd.add_argument("--variate", type=int, default=0)
    pd.add_argument("--out", required=True)
    data_flags(pd)

    r = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    r.add_argument("manifest")
    return p


COMMANDS = {
    "generate": cmd_generate, "train": cmd_train, "finetune": cmd_finetune,
    "evaluate": cmd_evaluate, "forecast": cmd_forecast, "inspect": cmd_inspect,
    "plotdata": cmd_plotdata, "replay": cmd_replay,
}


def _snapshot(paths) -> dict:
    """mtime of each output (and its manifest) before the command runs."""
    snap = {}
    for p in paths:
        if p:
            for q in (Path(p), Path(f"{p}.manifest.json")):
                snap[q] = q.stat().st_mtime_ns if q.exists() else None
    return snap


def _cleanup(snapshot: dict):
    """Remove outputs this run created or touched; leave untouched files alone."""
    for q, before in snapshot.items():
        if q.exists() and q.stat().st_mtime_ns != before:
            q.unlink()


def _outputs(args):
    outs = [getattr(args, "out", None)]
    if getattr(args, "loss_curve", None):
        outs.append(args.loss_curve)
    return outs


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "baseline", None) == "seasonal-naive":
        args.baseline = "seasonal_naive"
    started = time.time()
    appending = args.command == "evaluate"
    snapshot = {} if appending or args.command == "replay" else _snapshot(_outputs(args))
    try:
        config = read_config(args.config)
        COMMANDS[args.command](args, config, argv, started)
        return EXIT_OK
    except (UsageError, ValueError) as exc:
        code = {ParseError: EXIT_PARSE, CorpusFormatError: EXIT_PARSE,
                ShapeMismatch: EXIT_SHAPE, WindowTooLong: EXIT_SHAPE,
                ContextTooShort: EXIT_SHAPE, NonFiniteParameter: EXIT_NUMERIC}
        exit_code = next((c for cls, c in code.items() if isinstance(exc, cls)), EXIT_USAGE)
        print(f"error: {exc}", file=sys.stderr)
    except DivergedLoss as exc:
        exit_code = EXIT_DIVERGED
        print(f"error: {exc}", file=sys.stderr)
    except FactorizationFailed as exc:
        exit_code = EXIT_NUMERIC
        print(f"error: {exc}", file=sys.stderr)
    except OSError as exc:
        exit_code = EXIT_IO
        print(f"error: {exc}", file=sys.stderr)
    _cleanup(snapshot)
    return exit_code


if __name__ == "__main__":
    sys.exit(main())
