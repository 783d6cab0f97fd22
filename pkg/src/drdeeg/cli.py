"""Command-line interface: ``drdeeg {gen-data,train,eval,attack,corrupt,report}``.

Every command accepts ``--config FILE`` with ``key = value`` lines (``#``
starts a comment).  Values resolve as built-in defaults < config file <
command-line flags; unknown keys are rejected.  ``train`` echoes the fully
resolved config to ``config.txt`` in the run directory, which can be fed
back through ``--config`` to reproduce the run.

Primary outputs (datasets, checkpoints, CSVs) are bit-reproducible for a
fixed seed; wall-clock times and timestamps only go to ``meta.json``.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import statistics
import sys
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .data import NormStats, SynthConfig, normalize, read_dataset, synthetic_dataset, write_dataset
from .decoder import DecoderArch, load_params, save_params
from .evolve import EvolutionConfig
from .robust_eval import (
    DEFAULT_SUITE,
    AttackConfig,
    EvalReport,
    accuracy,
    append_rows,
    attack_accuracy,
    corruption_error,
)
from .trainer import METHODS, TrainConfig, loso_split, train, write_history

RUN_FILES = ("model.drd", "history.csv", "config.txt", "normalization.csv")


class CLIError(Exception):
    pass


# -- option tables ------------------------------------------------------------

def _positive_int(text):
    v = int(text)
    if v < 1:
        raise ValueError(f"must be a positive integer, got {text}")
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise ValueError(f"must be a non-negative integer, got {text}")
    return v


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise ValueError(f"must be > 0, got {text}")
    return v


def _nonneg_float(text):
    v = float(text)
    if not v >= 0:
        raise ValueError(f"must be >= 0, got {text}")
    return v


def _fraction(text):
    v = float(text)
    if not 0 < v <= 1:
        raise ValueError(f"must lie in (0, 1], got {text}")
    return v


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text}")


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"must be one of {', '.join(options)}, got {text}")
        return text
    parse.__name__ = "choice"
    return parse


def _optional_int(text):
    return None if str(text).lower() in ("", "none") else _nonneg_int(text)


@dataclass(frozen=True)
class Opt:
    name: str
    parse: object
    default: object
    help: str
    flag_only: bool = False  # booleans exposed as store_true switches


_EVO = EvolutionConfig()

GEN_OPTS = [
    Opt("out", str, None, "output EEGSEG1 file"),
    Opt("classes", _positive_int, 4, "number of classes"),
    Opt("subjects", _positive_int, 6, "number of subjects"),
    Opt("trials", _positive_int, 60, "trials per subject"),
    Opt("snr", _positive_float, 1.0, "signal-to-noise power ratio"),
    Opt("channels", _positive_int, 8, "channels C"),
    Opt("window", _positive_int, 400, "segment length T"),
    Opt("trial_len", _positive_int, 600, "trial length L in samples"),
    Opt("stride", _positive_int, 50, "segmentation stride"),
    Opt("fs", _positive_float, 250.0, "sample rate in Hz"),
    Opt("seed", _nonneg_int, 0, "root seed"),
]

TRAIN_OPTS = [
    Opt("data", str, None, "EEGSEG1 dataset"),
    Opt("out", str, None, "run directory"),
    Opt("method", _choice(*METHODS), "base", "training method"),
    Opt("test_subject", _optional_int, None, "held-out subject id"),
    Opt("loso_all", _bool, False, "train one run per held-out subject", flag_only=True),
    Opt("eta", _nonneg_float, 1e-3, "learning rate"),
    Opt("epochs", _positive_int, 10, "epochs"),
    Opt("batch_size", _positive_int, 32, "mini-batch size"),
    Opt("fraction", _fraction, 1.0, "training-data fraction"),
    Opt("aug_prob", _fraction, 0.5, "per-sample augmentation probability"),
    Opt("alpha", _nonneg_float, _EVO.alpha, "evolution rate"),
    Opt("beta", _nonneg_float, _EVO.beta, "gradient dot product factor"),
    Opt("gamma", _nonneg_float, _EVO.gamma, "distance weight"),
    Opt("tau", _nonneg_float, _EVO.tau, "momentum friction (hmc)"),
    Opt("steps", _positive_int, _EVO.steps, "evolution steps"),
    Opt("distance", _choice("kl", "wb"), _EVO.distance, "distance mode"),
    Opt("kl_sigma2", _positive_float, _EVO.kl_sigma2, "Gaussian reference variance (kl)"),
    Opt("fd_delta", _positive_float, _EVO.fd_delta, "mixed-Hessian finite-difference step"),
    Opt("noise", _bool, True, "inject Langevin noise"),
    Opt("f1", _positive_int, 8, "spatial filters"),
    Opt("f2", _positive_int, 16, "temporal filters"),
    Opt("f3", _positive_int, 16, "pointwise filters"),
    Opt("kernel", _positive_int, 32, "temporal kernel length"),
    Opt("seed", _nonneg_int, 0, "root seed"),
]

_EVAL_COMMON = [
    Opt("model", str, None, "run directory or checkpoint file"),
    Opt("data", str, None, "EEGSEG1 dataset"),
    Opt("out", str, None, "CSV file to append rows to (default: <run>/eval.csv)"),
    Opt("test_subject", _optional_int, None, "subject to evaluate (default: the run's held-out subject)"),
    Opt("limit", _optional_int, None, "evaluate only the first N segments"),
    Opt("seed", _nonneg_int, 0, "evaluation seed"),
]

EVAL_OPTS = _EVAL_COMMON + [
    Opt("attacks", str, "pgd:0.02,pgd:0.1", "comma list of pgd:EPS / cw, or none"),
    Opt("pgd_steps", _positive_int, 40, "PGD iterations"),
]

ATTACK_OPTS = _EVAL_COMMON + [
    Opt("attack", _choice("pgd", "cw"), "pgd", "attack kind"),
    Opt("eps", _nonneg_float, 0.02, "l-inf radius (pgd)"),
    Opt("pgd_steps", _positive_int, 40, "PGD iterations"),
    Opt("cw_c", _nonneg_float, 1.0, "C&W constant"),
    Opt("cw_steps", _positive_int, 200, "C&W iterations"),
    Opt("cw_lr", _positive_float, 0.01, "C&W step size"),
]

CORRUPT_OPTS = list(_EVAL_COMMON)

REPORT_OPTS = [
    Opt("runs_dir", str, None, "directory holding run directories"),
    Opt("out_csv", str, None, "summary CSV path (default: <runs_dir>/report.csv)"),
    Opt("out_md", str, None, "summary markdown path (default: <runs_dir>/report.md)"),
]


# -- config resolution --------------------------------------------------------

def parse_config_file(path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CLIError(f"{path}:{lineno}: expected 'key = value'")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def resolve(opts: list[Opt], ns: argparse.Namespace) -> dict:
    table = {o.name: o for o in opts}
    cfg = {o.name: o.default for o in opts}
    if getattr(ns, "config", None):
        for key, text in parse_config_file(ns.config).items():
            if key not in table:
                raise CLIError(f"{ns.config}: unknown key {key!r}")
            try:
                cfg[key] = table[key].parse(text)
            except ValueError as err:
                raise CLIError(f"{ns.config}: {key}: {err}") from None
    for o in opts:
        if hasattr(ns, o.name):
            cfg[o.name] = getattr(ns, o.name)
    return cfg


def format_config(cfg: dict) -> str:
    lines = []
    for key in sorted(cfg):
        v = cfg[key]
        lines.append(f"{key} = {'none' if v is None else repr(v) if isinstance(v, float) else v}")
    return "\n".join(lines) + "\n"


def _argparse_type(opt: Opt):
    def convert(text):
        try:
            return opt.parse(text)
        except ValueError as err:
            raise argparse.ArgumentTypeError(str(err)) from None
    convert.__name__ = opt.name
    return convert


def _add_opts(parser, opts):
    parser.add_argument("--config", help="key = value config file")
    for o in opts:
        flag = "--" + o.name.replace("_", "-")
        shown = "" if o.default is None else f" (default: {o.default})"
        if o.flag_only:
            parser.add_argument(flag, action="store_true", default=argparse.SUPPRESS, help=o.help + shown)
        else:
            parser.add_argument(flag, type=_argparse_type(o), default=argparse.SUPPRESS, help=o.help + shown)


def _require(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise CLIError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


# -- gen-data -----------------------------------------------------------------

def cmd_gen_data(cfg) -> int:
    _require(cfg, "out")
    synth = SynthConfig(n_subjects=cfg["subjects"], trials_per_subject=cfg["trials"], n_classes=cfg["classes"],
                        window=cfg["window"], n_channels=cfg["channels"], fs=cfg["fs"], snr=cfg["snr"],
                        trial_len=cfg["trial_len"], stride=cfg["stride"])
    ds = synthetic_dataset(synth, cfg["seed"])
    write_dataset(ds, cfg["out"])
    print(f"wrote {cfg['out']}: {len(ds)} segments, {synth.n_subjects} subjects, {ds.n_classes} classes, "
          f"T={ds.window} C={ds.n_channels} fs={ds.fs:g}")
    return 0


# -- train --------------------------------------------------------------------

def write_norm(stats: NormStats, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["channel", "mean", "std"])
        for c, (m, s) in enumerate(zip(stats.mean, stats.std)):
            w.writerow([c, repr(float(m)), repr(float(s))])


def read_norm(path) -> NormStats:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return NormStats(np.array([float(r["mean"]) for r in rows]), np.array([float(r["std"]) for r in rows]))


def _train_one(ds, cfg, test_subject, run_dir: Path) -> None:
    from .data import fit_stats

    train_set, test_set = loso_split(ds, test_subject)
    stats = fit_stats(train_set)
    train_set, test_set = normalize(train_set, stats), normalize(test_set, stats)
    arch = DecoderArch(ds.n_channels, ds.window, ds.n_classes, cfg["f1"], cfg["f2"], cfg["f3"], cfg["kernel"])
    evo = EvolutionConfig(alpha=cfg["alpha"], beta=cfg["beta"], gamma=cfg["gamma"], tau=cfg["tau"],
                          steps=cfg["steps"], distance=cfg["distance"], kl_sigma2=cfg["kl_sigma2"],
                          fd_delta=cfg["fd_delta"], noise=cfg["noise"], seed=cfg["seed"])
    tcfg = TrainConfig(eta=cfg["eta"], epochs=cfg["epochs"], batch_size=cfg["batch_size"], method=cfg["method"],
                       evolution=evo, fraction=cfg["fraction"], seed=cfg["seed"], aug_prob=cfg["aug_prob"])
    started = datetime.now(timezone.utc).isoformat(timespec="seconds")
    t0 = time.perf_counter()
    params, history = train(train_set, arch, tcfg, test_set)
    seconds = time.perf_counter() - t0

    run_dir.mkdir(parents=True, exist_ok=True)
    save_params(params, run_dir / "model.drd")
    write_history(history, run_dir / "history.csv")
    write_norm(stats, run_dir / "normalization.csv")
    resolved = dict(cfg, test_subject=test_subject, loso_all=False, out=str(run_dir))
    (run_dir / "config.txt").write_text(format_config(resolved))
    meta = {"started": started, "seconds": seconds, "epoch_seconds": history.seconds}
    (run_dir / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    print(f"{run_dir}: method={cfg['method']} subject={test_subject} "
          f"final holdout acc={history.holdout_acc[-1]:.4f} ({seconds:.1f}s)")


def cmd_train(cfg) -> int:
    _require(cfg, "data", "out")
    ds = read_dataset(cfg["data"])
    out = Path(cfg["out"])
    if cfg["loso_all"]:
        for s in np.unique(ds.subjects).tolist():
            _train_one(ds, cfg, s, out / f"subject_{s:02d}")
    else:
        if cfg["test_subject"] is None:
            raise CLIError("need --test-subject or --loso-all")
        _train_one(ds, cfg, cfg["test_subject"], out)
    return 0


# -- eval / attack / corrupt --------------------------------------------------

@dataclass
class _Loaded:
    params: object
    x: np.ndarray
    y: np.ndarray
    method: str
    seed: int
    out: Path


def _load_for_eval(cfg) -> _Loaded:
    _require(cfg, "model", "data")
    model_path = Path(cfg["model"])
    run_dir = model_path if model_path.is_dir() else model_path.parent
    ckpt = model_path / "model.drd" if model_path.is_dir() else model_path
    params = load_params(ckpt)
    run_cfg = parse_config_file(run_dir / "config.txt") if (run_dir / "config.txt").exists() else {}

    ds = read_dataset(cfg["data"])
    arch = params.arch
    if (arch.window, arch.n_channels, arch.n_classes) != (ds.window, ds.n_channels, ds.n_classes):
        raise CLIError(f"model expects T={arch.window} C={arch.n_channels} classes={arch.n_classes}, "
                       f"data has T={ds.window} C={ds.n_channels} classes={ds.n_classes}")
    subject = cfg["test_subject"]
    if subject is None and run_cfg.get("test_subject", "none") != "none":
        subject = int(run_cfg["test_subject"])
    if subject is not None:
        if subject not in set(ds.subjects.tolist()):
            raise CLIError(f"subject {subject} not present in {cfg['data']}")
        ds = ds.subset(np.flatnonzero(ds.subjects == subject))
    if (run_dir / "normalization.csv").exists():
        ds = normalize(ds, read_norm(run_dir / "normalization.csv"))
    if cfg["limit"] is not None:
        ds = ds.subset(np.arange(min(cfg["limit"], len(ds))))
    if len(ds) == 0:
        raise CLIError("no segments to evaluate")
    out = Path(cfg["out"]) if cfg["out"] else run_dir / "eval.csv"
    return _Loaded(params, ds.x, ds.y, run_cfg.get("method", "unknown"), int(run_cfg.get("seed", cfg["seed"])), out)


def _emit(report: EvalReport, path: Path) -> None:
    append_rows(path, report.rows())
    parts = [f"clean={report.clean_acc:.4f}"]
    parts += [f"{k}={v:.4f}" for k, v in report.corruption.items()]
    if report.corruption_mean is not None:
        parts.append(f"corruption_mean={report.corruption_mean:.4f}")
    parts += [f"{k}={v:.4f}" for k, v in report.attacks.items()]
    print(f"{report.method} seed={report.seed}: " + " ".join(parts) + f" ({report.seconds:.1f}s) -> {path}")


def _parse_attacks(text: str, pgd_steps: int, seed: int) -> list[tuple[str, AttackConfig]]:
    if text.strip().lower() in ("", "none"):
        return []
    out = []
    for item in text.split(","):
        kind, _, eps = item.strip().partition(":")
        if kind == "pgd":
            e = _nonneg_float(eps)
            out.append((f"pgd({e:g})", AttackConfig(kind="pgd", eps=e, pgd_steps=pgd_steps, seed=seed)))
        elif kind == "cw":
            out.append(("cw", AttackConfig(kind="cw", seed=seed)))
        else:
            raise CLIError(f"bad attack spec {item!r}; use pgd:EPS or cw")
    return out


def _corruption(report, loaded, seed):
    res = corruption_error(loaded.params, (loaded.x, loaded.y), DEFAULT_SUITE, seed=seed)
    report.corruption, report.corruption_mean = res.errors, res.mean


def cmd_eval(cfg) -> int:
    loaded = _load_for_eval(cfg)
    attacks = _parse_attacks(cfg["attacks"], cfg["pgd_steps"], cfg["seed"])
    t0 = time.perf_counter()
    report = EvalReport(loaded.method, loaded.seed, accuracy(loaded.params, (loaded.x, loaded.y)))
    _corruption(report, loaded, cfg["seed"])
    for label, acfg in attacks:
        report.attacks[label] = attack_accuracy(loaded.params, (loaded.x, loaded.y), acfg)
    report.seconds = time.perf_counter() - t0
    _emit(report, loaded.out)
    return 0


def cmd_attack(cfg) -> int:
    loaded = _load_for_eval(cfg)
    acfg = AttackConfig(kind=cfg["attack"], eps=cfg["eps"], pgd_steps=cfg["pgd_steps"], cw_c=cfg["cw_c"],
                        cw_steps=cfg["cw_steps"], cw_lr=cfg["cw_lr"], seed=cfg["seed"])
    t0 = time.perf_counter()
    report = EvalReport(loaded.method, loaded.seed, accuracy(loaded.params, (loaded.x, loaded.y)))
    label = f"pgd({acfg.eps:g})" if acfg.kind == "pgd" else "cw"
    report.attacks[label] = attack_accuracy(loaded.params, (loaded.x, loaded.y), acfg)
    report.seconds = time.perf_counter() - t0
    _emit(report, loaded.out)
    return 0


def cmd_corrupt(cfg) -> int:
    loaded = _load_for_eval(cfg)
    t0 = time.perf_counter()
    report = EvalReport(loaded.method, loaded.seed, accuracy(loaded.params, (loaded.x, loaded.y)))
    _corruption(report, loaded, cfg["seed"])
    report.seconds = time.perf_counter() - t0
    _emit(report, loaded.out)
    return 0


# -- report -------------------------------------------------------------------

def _run_dirs(root: Path) -> list[Path]:
    return sorted({p.parent for p in root.rglob("config.txt")})


def collect_metrics(root: Path) -> dict[tuple[str, str], list[float]]:
    """Per (method, metric) the list of values over runs (one value per run and metric)."""
    runs = _run_dirs(root)
    if not runs:
        raise CLIError(f"{root}: no run directories found")
    missing = [str(r / f) for r in runs for f in RUN_FILES if not (r / f).exists()]
    if missing:
        raise CLIError("missing run files: " + ", ".join(missing))
    metrics: dict[tuple[str, str], list[float]] = {}
    for run in runs:
        run_cfg = parse_config_file(run / "config.txt")
        method = run_cfg.get("method", "unknown")
        with open(run / "history.csv", newline="") as fh:
            hist = list(csv.DictReader(fh))
        if hist:
            metrics.setdefault((method, "holdout_acc"), []).append(float(hist[-1]["holdout_acc"]))
        if (run / "eval.csv").exists():
            latest = {}
            with open(run / "eval.csv", newline="") as fh:
                for row in csv.DictReader(fh):
                    name = row["kind"] + (f"({row['param']})" if row["param"] else "")
                    latest[name] = float(row["value"])  # later rows win
            for name, value in latest.items():
                metrics.setdefault((method, name), []).append(value)
    return metrics


def cmd_report(cfg) -> int:
    _require(cfg, "runs_dir")
    root = Path(cfg["runs_dir"])
    if not root.is_dir():
        raise CLIError(f"{root}: not a directory")
    metrics = collect_metrics(root)
    rows = []
    for (method, metric), values in sorted(metrics.items()):
        rows.append((method, metric, len(values), statistics.fmean(values), statistics.pstdev(values)))
    out_csv = Path(cfg["out_csv"]) if cfg["out_csv"] else root / "report.csv"
    out_md = Path(cfg["out_md"]) if cfg["out_md"] else root / "report.md"
    with open(out_csv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "metric", "n", "mean", "std"])
        for method, metric, n, mean, std in rows:
            w.writerow([method, metric, n, repr(mean), repr(std)])
    md = ["| method | metric | n | mean ± std |", "|---|---|---|---|"]
    md += [f"| {m} | {k} | {n} | {mean:.4f} ± {std:.4f} |" for m, k, n, mean, std in rows]
    text = "\n".join(md) + "\n"
    out_md.write_text(text)
    print(text, end="")
    return 0


# -- entry point ----------------------------------------------------------------

COMMANDS = {
    "gen-data": (GEN_OPTS, cmd_gen_data, "generate a synthetic EEGSEG1 dataset"),
    "train": (TRAIN_OPTS, cmd_train, "train a decoder with leave-one-subject-out"),
    "eval": (EVAL_OPTS, cmd_eval, "clean accuracy, corruption suite and attacks"),
    "attack": (ATTACK_OPTS, cmd_attack, "accuracy under one adversarial attack"),
    "corrupt": (CORRUPT_OPTS, cmd_corrupt, "corruption-suite errors"),
    "report": (REPORT_OPTS, cmd_report, "aggregate run directories into tables"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drdeeg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (opts, _, help_text) in COMMANDS.items():
        _add_opts(sub.add_parser(name, help=help_text), opts)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    opts, func, _ = COMMANDS[args.command]
    try:
        return func(resolve(opts, args))
    except (CLIError, ValueError, OSError, FloatingPointError, KeyError) as err:
        msg = " ".join(str(err).split()) or type(err).__name__
        print(f"drdeeg {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
