"""Command-line entry point: synth, train, score, eval, report and rerun.

Exit codes:
    0  success
    2  bad flags or config file
    3  I/O or file-format failure
    4  non-finite training loss
    5  model / data dimension mismatch
    6  score / label shape mismatch in eval

stdout carries one summary line per command; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .datagen import CSVFormatError, SynthConfig, correlated_preset, load_csv, mackey_preset, save_csv
from .evalkit import LabeledScores, evaluate, pr_curve_and_auprc, save_curves
from .experiments import (default_synth, default_train, lambda_sweep, proportion_sweep,
                          regularizer_convergence, write_rows)
from .nets import ModelConfig, load_checkpoint, save_checkpoint
from .objective import REGULARIZERS
from .scoring import CRITERIA, load_scores, save_scores, score_series
from .training import NonFiniteLoss, Normalization, TrainConfig, make_windows, normalize, train

log = logging.getLogger("sisvae")

EXIT_OK, EXIT_FLAGS, EXIT_IO, EXIT_NONFINITE, EXIT_DIM, EXIT_SHAPE = 0, 2, 3, 4, 5, 6


class CLIError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# manifest


def write_manifest(path, command: str, ctx: dict, config: dict, seed, inputs: dict, outputs: dict,
                   wall_time: float) -> None:
    """``ctx`` holds the raw argv (without --config) and any config-file values."""
    doc = {
        "command": command,
        "argv": list(ctx["argv"]),
        "config_file_values": dict(ctx["config_file_values"]),
        "config": config,
        "seed": seed,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "tool_version": __version__,
        "wall_time_s": wall_time,
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, ctx) -> str:
    t0 = time.perf_counter()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.preset == "correlated":
        cfg = SynthConfig(m=args.m, t=args.t, anomaly_prob=args.anomaly_prob,
                          kernel_lengthscale=args.lengthscale, noise_base=args.noise_base, seed=args.seed)
        series = correlated_preset(cfg)
        config = asdict(cfg)
    else:
        series = mackey_preset(n=args.n, seed=args.seed, point_rate=args.point_rate,
                               subseq_count=args.subseq_count, tau=args.tau)
        config = {"n": args.n, "seed": args.seed, "point_rate": args.point_rate,
                  "subseq_count": args.subseq_count, "tau": args.tau}
    data_path = out / f"{args.preset}.csv"
    save_csv(series, data_path)
    label_file = data_path.with_name(data_path.stem + ".labels.csv")
    write_manifest(out / f"{args.preset}.manifest.json", "synth", ctx, config, args.seed, {},
                   {"data": data_path, "labels": label_file}, time.perf_counter() - t0)
    return f"synth {args.preset}: {series.m}x{series.t} anomalies={int(series.labels.sum())} -> {data_path}"


def _train_config(args) -> TrainConfig:
    return TrainConfig(window_w=args.window, step_s=args.step, batch_size=args.batch_size, epochs=args.epochs,
                       lr=args.lr, lam=args.lam, seed=args.seed, regularizer=args.regularizer,
                       clip_norm=args.clip)


def cmd_train(args, ctx) -> str:
    t0 = time.perf_counter()
    series = load_csv(args.data)
    if args.window > series.t:
        raise CLIError(EXIT_DIM, f"window {args.window} exceeds series length {series.t}")
    tcfg = _train_config(args)
    mcfg = ModelConfig(x_dim=series.m, h_dim=args.h_dim, z_dim=args.z_dim, feat_dim=args.feat_dim,
                       sigma_floor=args.sigma_floor)
    if args.normalize:
        series, stats = normalize(series)
    else:
        stats = Normalization(np.zeros(series.m), np.ones(series.m))
    chunks = make_windows(series, tcfg.window_w, tcfg.step_s)

    def progress(epoch, _params, rec):
        log.info("epoch %d/%d total=%.4f kl=%.4f nll=%.4f smooth=%.4f", epoch + 1, tcfg.epochs, rec.total,
                 rec.inference_kl, rec.neg_loglik, rec.smooth)

    params, history = train(chunks, tcfg, mcfg, callback=progress)
    out = Path(args.out)
    extra = {"normalization": {"mean": stats.mean.tolist(), "std": stats.std.tolist()},
             "train_config": asdict(tcfg), "series_ids": series.series_ids}
    save_checkpoint(out, params, trainer_state=history.optimizer_state.to_dict(), extra=extra)
    hist_path = out.with_name(out.stem + ".history.csv")
    history.to_csv(hist_path)
    write_manifest(out.with_name(out.stem + ".manifest.json"), "train", ctx,
                   {**asdict(tcfg), **mcfg.to_dict(), "normalize": args.normalize}, tcfg.seed,
                   {"data": args.data}, {"checkpoint": out, "history": hist_path}, time.perf_counter() - t0)
    return f"train: {len(history)} epochs final_total={history.records[-1].total:.6g} -> {out}"


def cmd_score(args, ctx) -> str:
    t0 = time.perf_counter()
    params, doc = load_checkpoint(args.checkpoint)
    series = load_csv(args.data)
    if series.m != params.config.x_dim:
        raise CLIError(EXIT_DIM, f"data has {series.m} series but checkpoint x_dim is {params.config.x_dim}")
    window = args.window or doc.get("train_config", {}).get("window_w")
    if not window:
        raise CLIError(EXIT_FLAGS, "--window is required for checkpoints without a stored train config")
    if window > series.t:
        raise CLIError(EXIT_DIM, f"window {window} exceeds series length {series.t}")
    norm = doc.get("normalization")
    x = series.values
    if norm is not None:
        x = (x - np.asarray(norm["mean"])[:, None]) / np.asarray(norm["std"])[:, None]
    scores = score_series(params, x, window, args.criterion, L=args.L, seed=args.seed)
    out = Path(args.out)
    save_scores(scores, out, series.series_ids, alpha=args.alpha)
    write_manifest(out.with_name(out.stem + ".manifest.json"), "score", ctx,
                   {"criterion": args.criterion, "L": args.L, "window": window, "alpha": args.alpha},
                   args.seed, {"checkpoint": args.checkpoint, "data": args.data}, {"scores": out},
                   time.perf_counter() - t0)
    return f"score {args.criterion}: {series.m}x{series.t} mean={scores.scores.mean():.6g} -> {out}"


def cmd_eval(args, ctx) -> str:
    t0 = time.perf_counter()
    scores, ids = load_scores(args.scores)
    labels = load_csv(args.labels).values
    if labels.shape != scores.scores.shape:
        raise CLIError(EXIT_SHAPE, f"scores are {scores.scores.shape} but labels are {labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise CLIError(EXIT_IO, f"{args.labels}: labels must be 0/1")
    data = LabeledScores.from_matrix(scores, labels.astype(np.int64))
    try:
        metrics = evaluate(data, args.k)
        curves, _, _ = pr_curve_and_auprc(data)
    except ValueError as exc:
        raise CLIError(EXIT_SHAPE, str(exc)) from None
    out = Path(args.out)
    tmp = out.with_name(out.name + ".tmp")
    tmp.write_text(json.dumps(metrics, indent=2) + "\n", encoding="utf-8")
    tmp.replace(out)
    roc, pr = out.with_name(out.stem + ".roc.csv"), out.with_name(out.stem + ".pr.csv")
    save_curves(curves, roc, pr)
    write_manifest(out.with_name(out.stem + ".manifest.json"), "eval", ctx, {"k": args.k}, None,
                   {"scores": args.scores, "labels": args.labels}, {"metrics": out, "roc": roc, "pr": pr},
                   time.perf_counter() - t0)
    return (f"eval: auroc={metrics['auroc']:.4f} auprc={metrics['auprc']:.4f} "
            f"best_f1={metrics['best_f1']:.4f} -> {out}")


def cmd_report(args, ctx) -> str:
    t0 = time.perf_counter()
    synth = default_synth(m=args.m, t=args.t, kernel_lengthscale=args.lengthscale, anomaly_prob=args.anomaly_prob)
    tcfg = default_train(epochs=args.epochs, window_w=args.window, step_s=args.window, lr=args.lr)
    kw = {"h_dim": args.h_dim, "z_dim": args.z_dim}
    if args.experiment == "lambda":
        rows = lambda_sweep(args.values or [0.0, 0.25, 0.5, 1.0, 2.0], args.seeds, synth, tcfg, L=args.L, **kw)
    elif args.experiment == "proportion":
        rows = proportion_sweep(args.values or [0.005, 0.01, 0.02, 0.05, 0.1], args.seeds, synth, tcfg,
                                L=args.L, **kw)
    else:
        rows = regularizer_convergence(list(REGULARIZERS), synth, tcfg, **kw)
    out = Path(args.out)
    write_rows(rows, out)
    write_manifest(out.with_name(out.stem + ".manifest.json"), "report", ctx,
                   {"experiment": args.experiment, **asdict(synth), **asdict(tcfg)}, args.seeds, {},
                   {"table": out}, time.perf_counter() - t0)
    return f"report {args.experiment}: {len(rows)} rows -> {out}"


def cmd_rerun(args, ctx) -> str:
    try:
        doc = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
        sub, values = doc["argv"], doc.get("config_file_values", {})
    except (KeyError, ValueError) as exc:
        raise CLIError(EXIT_IO, f"{args.manifest}: not a run manifest ({exc})") from None
    code = main(sub, config_values=values)
    if code != EXIT_OK:
        raise CLIError(code, f"rerun of {args.manifest} failed with exit code {code}")
    return f"rerun: {doc['command']} reproduced from {args.manifest}"


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sisvae", description="Smoothness-inducing sequential VAE anomaly detector")
    p.add_argument("--config", help="key=value file supplying defaults for the subcommand's flags")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("preset", choices=["correlated", "mackey"])
    s.add_argument("--out-dir", default=".")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--m", type=int, default=100)
    s.add_argument("--t", type=int, default=200)
    s.add_argument("--anomaly-prob", type=float, default=0.02)
    s.add_argument("--lengthscale", type=float, default=10.0)
    s.add_argument("--noise-base", type=float, default=0.1)
    s.add_argument("--n", type=int, default=5000)
    s.add_argument("--point-rate", type=float, default=0.003)
    s.add_argument("--subseq-count", type=int, default=2)
    s.add_argument("--tau", type=int, default=17)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="fit a model to a data CSV")
    t.add_argument("data")
    t.add_argument("--out", default="model.json")
    t.add_argument("--h-dim", type=int, default=200)
    t.add_argument("--z-dim", type=int, default=40)
    t.add_argument("--feat-dim", type=int, default=None)
    t.add_argument("--sigma-floor", type=float, default=1e-3)
    t.add_argument("--window", type=int, default=120)
    t.add_argument("--step", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--lambda", dest="lam", type=float, default=0.5)
    t.add_argument("--regularizer", choices=list(REGULARIZERS), default="kl")
    t.add_argument("--clip", type=float, default=5.0, help="global gradient-norm clip (0 disables)")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--normalize", action=argparse.BooleanOptionalAction, default=True,
                   help="standardize each series before training")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("score", help="score a data CSV with a trained checkpoint")
    c.add_argument("checkpoint")
    c.add_argument("data")
    c.add_argument("--out", default="scores.csv")
    c.add_argument("--criterion", choices=list(CRITERIA), default="prob")
    c.add_argument("--L", type=int, default=128)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--window", type=int, default=None, help="defaults to the training window")
    c.add_argument("--alpha", type=float, default=None, help="also write flags for score > alpha")
    c.set_defaults(func=cmd_score)

    e = sub.add_parser("eval", help="compute detection metrics for a score CSV")
    e.add_argument("scores")
    e.add_argument("labels")
    e.add_argument("--k", type=_int_list, default=[10, 50, 200])
    e.add_argument("--out", default="metrics.json")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="run a parameter sweep on synthetic data and write a CSV table")
    r.add_argument("experiment", choices=["lambda", "proportion", "regularizer"])
    r.add_argument("--out", default="report.csv")
    r.add_argument("--values", type=_float_list, default=None, help="swept values (lambda or anomaly prob)")
    r.add_argument("--seeds", type=_int_list, default=[1])
    r.add_argument("--m", type=int, default=20)
    r.add_argument("--t", type=int, default=400)
    r.add_argument("--lengthscale", type=float, default=80.0)
    r.add_argument("--anomaly-prob", type=float, default=0.02)
    r.add_argument("--window", type=int, default=40)
    r.add_argument("--epochs", type=int, default=40)
    r.add_argument("--lr", type=float, default=5e-3)
    r.add_argument("--h-dim", type=int, default=32)
    r.add_argument("--z-dim", type=int, default=8)
    r.add_argument("--L", type=int, default=16)
    r.set_defaults(func=cmd_report)

    m = sub.add_parser("rerun", help="re-execute the command recorded in a manifest")
    m.add_argument("manifest")
    m.set_defaults(func=cmd_rerun)
    return p


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment. Keys may use '-' or '_'."""
    out = {}
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CLIError(EXIT_FLAGS, f"{path}:{i}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _apply_config(parser: argparse.ArgumentParser, argv: list[str], cfg: dict[str, str]) -> argparse.Namespace:
    """Parse once to find the subcommand, then re-parse with config values as defaults."""
    args = parser.parse_args(argv)
    subparser = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
    actions = {a.dest: a for a in subparser._actions}  # noqa: SLF001
    key_alias = {"lambda": "lam"}
    defaults = {}
    for k, raw in cfg.items():
        dest = key_alias.get(k, k)
        action = actions.get(dest)
        if action is None or not action.option_strings:
            raise CLIError(EXIT_FLAGS, f"config key {k!r} is not an option of '{args.command}'")
        if isinstance(action, argparse.BooleanOptionalAction):
            val = raw.lower() in ("1", "true", "yes", "on")
        else:
            conv = action.type or str
            try:
                val = conv(raw)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise CLIError(EXIT_FLAGS, f"config key {k!r}: {exc}") from None
            if action.choices is not None and val not in action.choices:
                raise CLIError(EXIT_FLAGS, f"config key {k!r}: {val!r} not in {list(action.choices)}")
        defaults[dest] = val
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def _strip_config(argv: list[str]) -> list[str]:
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
        elif a == "--config":
            skip = True
        elif not a.startswith("--config="):
            out.append(a)
    return out


def main(argv: list[str] | None = None, config_values: dict[str, str] | None = None) -> int:
    """Run one command; ``config_values`` stands in for a config file (used by rerun)."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = dict(config_values or {})
        if args.config:
            try:
                cfg.update(read_config_file(args.config))
            except OSError as exc:
                raise CLIError(EXIT_IO, f"cannot read config file: {exc}") from None
        if cfg:
            try:
                args = _apply_config(parser, argv, cfg)
            except SystemExit as exc:
                return int(exc.code or 0)
        ctx = {"argv": _strip_config(argv), "config_file_values": cfg}
        summary = args.func(args, ctx)
    except CLIError as exc:
        print(f"sisvae: error: {exc}", file=sys.stderr)
        return exc.code
    except NonFiniteLoss as exc:
        print(f"sisvae: error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (OSError, CSVFormatError) as exc:
        print(f"sisvae: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # remaining ValueErrors come from config validation (bad flag values)
        print(f"sisvae: error: {exc}", file=sys.stderr)
        return EXIT_FLAGS
    print(summary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
