"""``tempee generate|train|eval|bench``.

Exit codes: 0 success, 2 usage or configuration problem, 3 corrupt data or
checkpoint, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import (
    AttentionConfig,
    complexity_mhsa,
    complexity_report,
    init_mhsa,
    init_msta,
    mhsa_forward,
    msta_forward,
)
from .config import ConfigParseError, build_dataclass, parse_config
from .data import (
    REGIMES,
    EchoSequence,
    dbz_to_pixel,
    gen_synthetic,
    normalize_regime,
    persistence_forecast,
    read_est,
    read_manifest,
    split_dataset,
    write_est,
    write_manifest,
)
from .errors import ConfigError, FormatError, NumericError, TempEEError
from .metrics import DEFAULT_TAUS, aggregate_reports, timewise_report
from .model import ModelConfig, TempEE, extrapolate, load_checkpoint, save_checkpoint
from .sampling import RssSchedule
from .tensor import Tensor
from .training import TrainConfig, train_loop

EXIT_OK, EXIT_USAGE, EXIT_CORRUPT, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST = "manifest.txt"
# attention matrices above this many bytes are not timed
BENCH_MEMORY_LIMIT = 512 * 2**20


def seq_path(data_dir: Path, seed: int) -> Path:
    return data_dir / f"seq_{seed:06d}.est"


# ---------------------------------------------------------------- generate


def cmd_generate(args) -> int:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from exc
    test_count = args.test_count if args.test_count is not None else max(1, args.count // 10)
    seeds = range(args.seed, args.seed + args.count)
    test = range(args.seed + args.count, args.seed + args.count + test_count)
    split = split_dataset(seeds, (0.9, 0.1), test)
    for s in list(seeds) + list(test):
        write_est(seq_path(out, s), gen_synthetic(args.regime, args.n, args.k, args.size, args.size, s))
    write_manifest(out / MANIFEST, split)
    print(f"wrote {args.count + test_count} sequences to {out}: {len(split.train)} train, {len(split.val)} val, {len(split.test)} test")
    return EXIT_OK


# ---------------------------------------------------------------- train


@dataclass
class RunConfig:
    data_dir: Path
    out_dir: Path
    model: ModelConfig
    train: TrainConfig
    rss: RssSchedule
    thresholds: tuple[float, ...] = DEFAULT_TAUS
    seed: int = 0
    source: Path | None = field(default=None, repr=False)


SECTIONS = ("run", "model", "attention", "train", "rss")


def load_run_config(path: str | Path) -> RunConfig:
    """Parse a training config; paths are resolved relative to the config file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    sections = parse_config(text)
    for name, sec in sections.items():
        if name not in SECTIONS:
            raise ConfigParseError(f"unknown section [{name}]", sec.lineno or None)
    run = sections.get("run")
    if run is None:
        raise ConfigParseError("missing [run] section with data_dir and out_dir")
    allowed = {"data_dir", "out_dir", "thresholds", "seed"}
    for key in run.values:
        if key not in allowed:
            raise ConfigParseError(f"unknown key {key!r} in [run]", run.lines[key])
    for key in ("data_dir", "out_dir"):
        if key not in run.values:
            raise ConfigParseError(f"[run] needs {key}", run.lineno)
    base = path.parent
    try:
        seed = int(run.values.get("seed", "0"))
        taus = tuple(float(v) for v in run.values.get("thresholds", ",".join(map(str, DEFAULT_TAUS))).split(","))
    except ValueError as exc:
        raise ConfigParseError(f"bad value in [run]: {exc}", run.lineno) from None
    att = build_dataclass(AttentionConfig, sections.get("attention"))
    model = build_dataclass(ModelConfig, sections.get("model"), attention=att)
    train = build_dataclass(TrainConfig, sections.get("train"), **({} if "train" in sections and "seed" in sections["train"].values else {"seed": seed}))
    rss_defaults = {"decay_epochs": max(train.epochs // 2, 1), "seed": seed}
    if "rss" in sections:
        for key in list(rss_defaults):
            if key in sections["rss"].values:
                del rss_defaults[key]
    rss = build_dataclass(RssSchedule, sections.get("rss"), **rss_defaults)
    return RunConfig(base / run.values["data_dir"], base / run.values["out_dir"], model, train, rss, taus, seed, path)


def load_split(data_dir: Path, name: str, n_in: int) -> list[EchoSequence]:
    manifest = data_dir / MANIFEST
    if not manifest.is_file():
        raise ConfigError(f"no {MANIFEST} in {data_dir}")
    seeds = getattr(read_manifest(manifest), name)
    seqs = []
    for s in seeds:
        p = seq_path(data_dir, s)
        if not p.is_file():
            raise ConfigError(f"manifest lists seed {s} but {p} is missing")
        seq = read_est(p)
        seq.n_in = n_in
        seqs.append(seq)
    return seqs


def cmd_train(args) -> int:
    rc = load_run_config(args.config)
    if not rc.data_dir.is_dir():
        raise ConfigError(f"data_dir {rc.data_dir} does not exist")
    try:
        rc.out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create out_dir {rc.out_dir}: {exc}") from exc
    train = load_split(rc.data_dir, "train", rc.model.n_in)
    val = load_split(rc.data_dir, "val", rc.model.n_in)
    model = TempEE(rc.model, seed=rc.seed)
    result = train_loop(model, train, val, rc.train, rc.rss, out_dir=rc.out_dir, log=sys.stdout if args.verbose else None)
    save_checkpoint(rc.out_dir / "final.ckpt", model)
    print(f"best val MSE {result.best_val:.4f} at epoch {result.best_epoch}; {result.steps} steps, {result.epochs_run} epochs")
    return EXIT_OK


# ---------------------------------------------------------------- eval


def worker_count() -> int:
    raw = os.environ.get("TEMPEE_THREADS")
    if raw is None:
        return min(4, os.cpu_count() or 1)
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"TEMPEE_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"TEMPEE_THREADS must be >= 1, got {n}")
    return n


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    cfg = model.cfg
    data_dir = Path(args.data)
    seqs = load_split(data_dir, args.split, cfg.n_in)
    if not seqs:
        raise ConfigError(f"split {args.split!r} in {data_dir} is empty")
    report_dir = Path(args.report)
    try:
        report_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create report dir {report_dir}: {exc}") from exc
    taus = tuple(float(v) for v in args.taus.split(","))

    def one(seq: EchoSequence):
        frames = dbz_to_pixel(seq.frames).astype(np.float32) if seq.value_space == "dbz" else seq.frames
        obs, fut = frames[: cfg.n_in], frames[cfg.n_in :]
        pred = extrapolate(model, obs)
        kw = dict(taus=taus, dt_minutes=seq.dt_minutes, far_mode=args.far_mode, ets_mode=args.ets_mode)
        return timewise_report(pred, fut, **kw), timewise_report(persistence_forecast(obs, len(fut)), fut, **kw)

    # the forward pass holds per-call state only, so sequences can share one model
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        results = list(pool.map(one, seqs))
    report = aggregate_reports([r for r, _ in results])
    baseline = aggregate_reports([b for _, b in results])
    (report_dir / "report.csv").write_text(report.to_csv())
    (report_dir / "plot.csv").write_text(report.plot_csv())
    (report_dir / "report.txt").write_text(report.to_text())
    (report_dir / "persistence.csv").write_text(baseline.to_csv())
    print(report.to_text(), end="")
    return EXIT_OK


# ---------------------------------------------------------------- bench


def _ints(text: str, name: str, sweep: bool) -> list[int]:
    parts = text.split(",") if sweep else [text]
    try:
        values = [int(p) for p in parts]
    except ValueError:
        raise ConfigError(f"--{name} expects {'a comma list of ' if sweep else 'an '}integer{'s' if sweep else ''}, got {text!r}") from None
    if any(v < 1 for v in values):
        raise ConfigError(f"--{name} values must be positive, got {text!r}")
    return values


def time_forwards(c: int, h: int, w: int, gp: int, repeats: int = 3, seed: int = 0) -> tuple[float, float]:
    """Best-of-``repeats`` wall time of single-head MHSA and MSTA forwards."""
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(c, h, w)).astype(np.float32))
    cfg = AttentionConfig(heads=1, g=gp, g_prime=gp)
    wm, ws = init_mhsa(c, rng), init_msta(c, rng)
    best = []
    for fn, wts in ((mhsa_forward, wm), (msta_forward, ws)):
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn(x, wts, cfg)
            times.append(time.perf_counter() - t0)
        best.append(min(times))
    return best[0], best[1]


def bench_rows(cs, hs, ws, gps, wallclock: bool = True, memory_limit: int = BENCH_MEMORY_LIMIT):
    for c in cs:
        for h in hs:
            for w in ws:
                for gp in gps:
                    row = {
                        "c": c, "h": h, "w": w, "g_prime": gp,
                        "flops_mhsa": complexity_mhsa(c, h, w), "flops_msta": "", "ratio": "",
                        "wall_mhsa_s": "", "wall_msta_s": "", "wall_ratio": "", "analytic_only": 1,
                    }
                    # MSTA is only defined when g_prime divides the grid; such rows keep the MHSA count alone
                    tiled = h % gp == 0 and w % gp == 0
                    if tiled:
                        rep = complexity_report(c, h, w, gp)
                        row.update(flops_msta=rep.flops_msta, ratio=rep.ratio)
                    # the full-grid attention matrix dominates memory: (hw)^2 float32 entries, a few copies
                    if tiled and wallclock and 4 * 4 * (h * w) ** 2 <= memory_limit:
                        t_mhsa, t_msta = time_forwards(c, h, w, gp)
                        row.update(wall_mhsa_s=t_mhsa, wall_msta_s=t_msta, wall_ratio=t_msta / t_mhsa, analytic_only=0)
                    yield row


BENCH_COLUMNS = ("c", "h", "w", "g_prime", "flops_mhsa", "flops_msta", "ratio", "wall_mhsa_s", "wall_msta_s", "wall_ratio", "analytic_only")


def format_value(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def cmd_bench(args) -> int:
    cs = _ints(args.c, "c", args.sweep)
    hs = _ints(args.h, "h", args.sweep)
    ws = _ints(args.w, "w", args.sweep)
    gps = _ints(args.gprime, "gprime", args.sweep)
    print(",".join(BENCH_COLUMNS))
    for row in bench_rows(cs, hs, ws, gps, wallclock=not args.analytic_only):
        print(",".join(format_value(row[k]) for k in BENCH_COLUMNS))
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tempee", description="Radar echo extrapolation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic .est sequences and a seed manifest")
    g.add_argument("--regime", required=True, type=str.lower, choices=REGIMES + tuple(r.replace("-", "_") for r in REGIMES))
    g.add_argument("--count", type=int, required=True, help="train+val sequences (split 9:1)")
    g.add_argument("--seed", type=int, default=0, help="first seed; seeds are consecutive")
    g.add_argument("--out", required=True)
    g.add_argument("--test-count", type=int, default=None, help="test sequences from the following seed range")
    g.add_argument("--n", type=int, default=20, help="observed frames")
    g.add_argument("--k", type=int, default=20, help="future frames")
    g.add_argument("--size", type=int, default=96, help="frame edge in pixels")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--verbose", action="store_true", help="echo the epoch log to stdout")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a data split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--taus", default=",".join(f"{t:g}" for t in DEFAULT_TAUS), help="dBZ thresholds, comma separated")
    e.add_argument("--far-mode", default="standard", choices=("standard", "printed"))
    e.add_argument("--ets-mode", default="printed", choices=("printed", "standard"))
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="attention FLOP counts and wall-clock timings")
    b.add_argument("--c", required=True)
    b.add_argument("--h", required=True)
    b.add_argument("--w", required=True)
    b.add_argument("--gprime", default="2")
    b.add_argument("--sweep", action="store_true", help="treat every dimension flag as a comma list")
    b.add_argument("--analytic-only", action="store_true", help="skip wall-clock timing")
    b.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "regime", None):
        args.regime = normalize_regime(args.regime)
    try:
        return args.func(args)
    except FormatError as exc:
        print(f"tempee: corrupt input: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except NumericError as exc:
        print(f"tempee: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, TempEEError) as exc:
        print(f"tempee: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"tempee: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
