"""Command-line entry point.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.
Run directories land under ``--out``, else ``$TROJANDAM_OUTPUT_ROOT``, else the
config's ``output`` field.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import tomli

from . import checkpoint, config
from .config import ConfigError

log = logging.getLogger("trojandam")

ENV_OUTPUT_ROOT = "TROJANDAM_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

STUDY_PRESETS = {"activation": "figure3-activation", "kernels": "figure4-kernels",
                 "neurotoxin": "figure2-neurotoxin-k"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def output_root(cfg, override=None) -> Path:
    return Path(override or os.environ.get(ENV_OUTPUT_ROOT) or cfg.output)


def _parse_value(text: str):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text  # bare strings need no quoting on the command line


def load_config(spec: str, overrides=(), seed=None):
    cfg = config.load_any(spec)
    changes = {}
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        changes[key.strip()] = _parse_value(value.strip())
    if seed is not None:
        changes["seed"] = seed
    if changes:
        try:
            cfg = cfg.replace(**changes)
        except (KeyError, TypeError) as err:
            raise UsageError(f"unknown override path: {err}") from err
    return cfg


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o))


# --- subcommands -----------------------------------------------------------

def cmd_run(args) -> int:
    from .runner import run_experiment
    cfg = load_config(args.config, args.set, args.seed)
    if args.workers is not None:
        cfg = cfg.replace(workers=args.workers)
    out = Path(args.run_dir) if args.run_dir else output_root(cfg, args.out) / cfg.name / f"seed{cfg.seed}"
    summary = run_experiment(cfg, out, progress=args.verbose)
    if args.plot:
        from .plots import plot_metrics
        plot_metrics(out / "metrics.csv", title=f"{cfg.name} (seed {cfg.seed})")
    print(_dump(summary))
    print(f"wrote {out}", file=sys.stderr)
    return EXIT_OK


def _seed_list(text: str) -> list:
    seeds = []
    for part in text.split(","):
        lo, sep, hi = part.partition("-")
        try:
            seeds.extend(range(int(lo), int(hi) + 1) if sep else [int(lo)])
        except ValueError as err:
            raise UsageError(f"bad seed list {text!r}") from err
    if not seeds:
        raise UsageError("empty seed list")
    return seeds


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, args.set)
    seeds = _seed_list(args.seeds)
    root = output_root(cfg, args.out) / cfg.name
    procs = []
    pending = list(seeds)
    failed = []
    # every seed is an independent process; at most --jobs at a time
    while pending or procs:
        while pending and len(procs) < max(args.jobs, 1):
            seed = pending.pop(0)
            cmd = [sys.executable, "-m", "trojandam", "run", args.config, "--seed", str(seed),
                   "--run-dir", str(root / f"seed{seed}")]
            for item in args.set:
                cmd += ["--set", item]
            if args.plot:
                cmd.append("--plot")
            procs.append((seed, subprocess.Popen(cmd, stdout=subprocess.DEVNULL)))
        seed, proc = procs.pop(0)
        if proc.wait() != 0:
            failed.append(seed)
    summaries = {}
    for seed in seeds:
        path = root / f"seed{seed}" / "summary.json"
        if seed not in failed and path.exists():
            summaries[seed] = json.loads(path.read_text())
    report = {"name": cfg.name, "seeds": seeds, "failed": failed, "runs": summaries}
    for key in ("final_ma", "final_ba"):
        vals = [s[key] for s in summaries.values() if s.get(key) is not None]
        report[f"median_{key}"] = float(np.median(vals)) if vals else None
    root.mkdir(parents=True, exist_ok=True)
    (root / "sweep.json").write_text(_dump(report))
    print(_dump(report))
    return EXIT_RUNTIME if failed else EXIT_OK


def _histogram_data(spec: str):
    from .datasets import load_idx
    from .runner import load_main_data
    if "," in spec:
        images, labels = spec.split(",", 1)
        return load_idx(images, labels)
    _, test = load_main_data(config.load_any(spec))
    return test


def cmd_histogram(args) -> int:
    from .metrics import activation_histogram
    from .studies import DEFAULT_BINS
    model = checkpoint.load(args.checkpoint)
    data = _histogram_data(args.data)
    if args.limit:
        data = data.subset(np.arange(min(args.limit, len(data))))
    bins = [float(b) for b in args.bins.split(",")] if args.bins else list(DEFAULT_BINS)
    counts, active = activation_histogram(model, data.images, data.labels, bins, args.threshold)
    report = {"bins": bins, "counts": counts.tolist(), "threshold": args.threshold, "active": active,
              "samples": len(data)}
    print(_dump(report))
    return EXIT_OK


def cmd_study(args) -> int:
    from . import studies
    cfg = load_config(args.config or STUDY_PRESETS[args.kind], args.set)
    root = output_root(cfg, args.out) / cfg.name
    root.mkdir(parents=True, exist_ok=True)
    if args.kind == "activation":
        settings = studies.ActivationSettings.from_config(cfg)
        if args.seeds:
            settings.seeds = tuple(_seed_list(args.seeds))
        report = studies.activation_study(cfg, settings)
    elif args.kind == "kernels":
        settings = studies.KernelStudySettings.from_config(cfg)
        if args.seeds:
            settings.seeds = tuple(_seed_list(args.seeds))
        report = studies.kernel_vs_neuron_study(cfg, settings)
    else:
        seeds = _seed_list(args.seeds) if args.seeds else None
        report = studies.neurotoxin_study(cfg, root, seeds=seeds, workers=cfg.workers)
        report["non_decreasing"] = studies.is_non_decreasing([report["median_ba"][str(k)] for k in report["ks"]])
    (root / f"study-{args.kind}.json").write_text(_dump(report))
    print(_dump(report))
    return EXIT_OK


def cmd_inspect(args) -> int:
    manifest = checkpoint.inspect(args.checkpoint)
    if args.json:
        print(_dump(manifest))
        return EXIT_OK
    total = 0
    print(f"TDAM1 v{manifest['version']}  blob {manifest['blob_bytes']} bytes")
    for e in manifest["entries"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        total += n
        print(f"  {e['name']:<22} {e['role']:<16} {str(tuple(e['shape'])):<18} @{e['offset']}")
    print(f"  {total} values")
    return EXIT_OK


# --- wiring ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="trojandam", description="Federated backdoor attack/defense simulator.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path override, e.g. defense.name=trojandam")
        sp.add_argument("--out", help=f"output root (default: ${ENV_OUTPUT_ROOT} or the config's output)")
        if seed:
            sp.add_argument("--seed", type=int)

    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("config", help="TOML path or preset name")
    common(r)
    r.add_argument("--workers", type=int)
    r.add_argument("--run-dir", help="exact run directory (overrides the output root layout)")
    r.add_argument("--plot", action="store_true", help="also write an SVG of MA/BA per round")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run one process per seed and collect medians")
    s.add_argument("config")
    s.add_argument("--seeds", required=True, help="e.g. 0,1,2 or 0-4")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--plot", action="store_true")
    common(s, seed=False)
    s.set_defaults(func=cmd_sweep)

    h = sub.add_parser("histogram", help="gradient-magnitude histogram of a checkpoint on clean data")
    h.add_argument("checkpoint")
    h.add_argument("data", help="config/preset (uses its test split) or IMAGES.idx,LABELS.idx")
    h.add_argument("--threshold", type=float, default=0.02)
    h.add_argument("--bins", help="comma-separated bin edges")
    h.add_argument("--limit", type=int, default=0, help="use at most this many samples")
    h.set_defaults(func=cmd_histogram)

    st = sub.add_parser("study", help="motivation studies")
    st.add_argument("kind", choices=sorted(STUDY_PRESETS))
    st.add_argument("--config", help="defaults to the matching preset")
    st.add_argument("--seeds")
    common(st, seed=False)
    st.set_defaults(func=cmd_study)

    i = sub.add_parser("inspect", help="print a checkpoint manifest")
    i.add_argument("checkpoint")
    i.add_argument("--json", action="store_true")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, tomli.TOMLDecodeError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyError as err:  # unknown preset
        print(f"config error: {err.args[0] if err.args else err}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as err:
        code = EXIT_CONFIG if getattr(args, "config", None) == err.filename else EXIT_RUNTIME
        print(f"{'config' if code == EXIT_CONFIG else 'runtime'} error: {err}", file=sys.stderr)
        return code
    except Exception as err:  # noqa: BLE001 - the CLI boundary reports and exits
        log.debug("failure", exc_info=True)
        print(f"runtime error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
