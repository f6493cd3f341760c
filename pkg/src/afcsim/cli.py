"""Command-line interface.

Exit codes: 0 success, 2 configuration or input error, 3 statistically
undefined result (a g2 entry with zero singles).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

import numpy as np

from . import __version__, analytics
from .channel_memory import plan_channels, wavelength_to_frequency
from .coincidence import UndefinedEstimateError, g2_matrix
from .config import PRESETS, ConfigError, ExperimentConfig, load_schema
from .detection import read_tags, write_tags
from .experiment import noise_vs_wait, run, sweep_rows, sweep_storage_time

EXIT_OK, EXIT_CONFIG, EXIT_UNDEFINED = 0, 2, 3
log = logging.getLogger("afcsim")


def _floats(s: str) -> list[float]:
    return [float(x) for x in s.split(",") if x.strip()]


def _count(s: str) -> int:
    """Integer that may be written in scientific notation, e.g. ``1e7``."""
    try:
        return int(s)
    except ValueError:
        v = float(s)
        if not v.is_integer():
            raise argparse.ArgumentTypeError(f"not an integer: {s}") from None
        return int(v)


def _ints(s: str) -> list[int]:
    return [_count(x) for x in s.split(",") if x.strip()]


def _load_config(args) -> ExperimentConfig:
    cfg = PRESETS[args.preset]()
    if args.config:
        try:
            with open(args.config) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError([("", f"cannot read config: {e}")]) from e
        if not isinstance(doc, dict):
            raise ConfigError([("", "configuration must be a JSON object")])
        cfg = cfg.replace(**doc)
    over = {}
    if getattr(args, "workers", None):
        over["run"] = {"workers": args.workers}
    if getattr(args, "seed", None) is not None:
        over["master_seed"] = args.seed
    return cfg.replace(**over) if over else cfg


def _emit(text: str, path: str | None):
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_plan(args) -> int:
    if args.config or args.preset != "default":
        p = _load_config(args)["plan"]
        spacing, chirp, n, ref = p["comb_spacing_ghz"], p["chirp_span_ghz"], p["n_channels"], p["reference_wavelength_nm"]
    else:
        spacing, chirp, n, ref = args.comb_spacing, args.chirp_span, args.n_channels, args.reference_nm
    try:
        plan = plan_channels(spacing, chirp, n, wavelength_to_frequency(ref))
    except ValueError as e:
        raise ConfigError([("plan", str(e))]) from e
    _emit(json.dumps(plan.to_dict(), indent=2, sort_keys=True) + "\n", args.out)
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load_config(args)
    rep = run(cfg, args.trains, keep_tags=bool(args.dump_tags))
    outdir = args.out or cfg["output"]["dir"]
    if outdir:
        paths = rep.write(outdir)
        log.info("wrote %s", ", ".join(paths.values()))
    else:
        sys.stdout.write(rep.to_json())
    if args.dump_tags:
        write_tags(args.dump_tags, rep.tags)
    s = rep.summary
    log.info("diagonal mean %s, off-diagonal mean %s", s["diagonal"]["mean"], s["off_diagonal"]["mean"])
    return EXIT_UNDEFINED if rep.has_undefined else EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    trains = _ints(args.trains) if args.trains else None
    if trains is not None and len(trains) == 1:
        trains = trains[0]
    sw = sweep_storage_time(cfg, _floats(args.deltas), trains, args.reference_trains)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(sw, fh, indent=1, sort_keys=True)
    rows = sweep_rows(sw)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(rows)
    else:
        csv.writer(sys.stdout, lineterminator="\n").writerows(rows)
    bad = any("error" in p for p in sw["points"])
    return EXIT_UNDEFINED if bad else EXIT_OK


def cmd_analyze(args) -> int:
    tags = np.concatenate([read_tags(p) for p in args.tags])
    tags = tags[np.lexsort((tags["time"], tags["trial"]))]
    sdet, idet = _ints(args.signal_detectors), _ints(args.idler_detectors)
    soff = _ints(args.signal_offsets) if args.signal_offsets else [0] * len(sdet)
    ioff = _ints(args.idler_offsets) if args.idler_offsets else [0] * len(idet)
    if len(soff) != len(sdet) or len(ioff) != len(idet):
        raise ConfigError([("offsets", "one offset per detector required")])
    m = args.trials if args.trials else int(tags["trial"].max()) + 1 if tags.size else 0
    if m < 1:
        raise ConfigError([("trials", "trial count must be >= 1")])
    sig = [tags[tags["detector"] == d] for d in sdet]
    idl = [tags[tags["detector"] == d] for d in idet]
    mat = g2_matrix(sig, idl, args.window, m, [f"D{d}" for d in sdet], [f"D{d}" for d in idet],
                    signal_offsets=soff, idler_offsets=ioff, method=args.sigma)
    if args.out:
        mat.to_csv(args.out)
        if args.counts:
            mat.counts_to_csv(args.counts)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow([""] + mat.cols)
        for lab, row in zip(mat.rows, mat.entries):
            w.writerow([lab] + ["undefined" if e is None else str(e) for e in row])
    undefined = any(e is None for row in mat.entries for e in row)
    return EXIT_UNDEFINED if undefined else EXIT_OK


FITTERS = {
    "double-exp": lambda s, sg: analytics.fit_double_exponential(s, sg)[1],
    "exp": analytics.fit_exponential,
    "quadratic": analytics.fit_quadratic_linear,
    "inverse": analytics.fit_inverse,
}


def cmd_fit(args) -> int:
    try:
        data = np.genfromtxt(args.csv, delimiter=",", names=True, dtype=float)
    except (OSError, ValueError) as e:
        raise ConfigError([("csv", str(e))]) from e
    names = data.dtype.names
    if not names or len(names) < 2:
        raise ConfigError([("csv", "need a header row with at least two columns")])
    x, y = data[names[0]], data[names[1]]
    sigma = data[names[2]] if len(names) > 2 and args.weighted else None
    try:
        fit = FITTERS[args.model](np.column_stack([x, y]), sigma)
    except (ValueError, analytics.FitError) as e:
        raise ConfigError([("csv", str(e))]) from e
    _emit(f"model: {args.model}\n" + fit.report(), args.out)
    if args.curve:
        fit.curve_csv(args.curve, np.linspace(x.min(), x.max(), args.points))
    return EXIT_OK


def cmd_oracle(args) -> int:
    try:
        out = _oracle(args)
    except (ValueError, IndexError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError([(args.what, str(e))]) from e
    sys.stdout.write(json.dumps(out, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _oracle(args) -> dict:
    out = {}
    if args.what == "g2-snr":
        out = {"eta_c": args.eta_c, "snr": args.snr, "g2": analytics.g2_vs_snr(args.eta_c, args.snr)}
    elif args.what == "budget":
        b = analytics.EfficiencyBudget(args.eta_c, args.eta_s, args.eta_i, args.eta_n)
        p_s, p_i, p_si = analytics.predict_probabilities(b)
        out = {"p_s": p_s, "p_i": p_i, "p_si": p_si, "g2": analytics.g2_from_budget(b), "snr": b.snr}
    elif args.what == "crosstalk":
        C = np.array(json.loads(args.matrix), dtype=float)
        p = np.full(C.shape[0], args.eta_c) if args.p is None else np.array(_floats(args.p))
        x = analytics.CrosstalkMatrix(C, p)
        out = {"g2": analytics.crosstalk_g2_matrix(x).tolist()}
    elif args.what == "invert-crosstalk":
        out = {"C": analytics.invert_crosstalk(args.g2, args.eta_c)}
    elif args.what == "config":
        cfg = _load_config(args)
        out = {str(c): {"recall": cfg.recall_probability(c), "snr": cfg.budget(c).snr,
                        "g2": analytics.g2_from_budget(cfg.budget(c))} for c in cfg["modes"]["channels_used"]}
        out["noise_vs_wait"] = noise_vs_wait(cfg, [0, 0.01, 0.05, 0.1, 0.2, 0.3])
    return out


def cmd_schema(args) -> int:
    _emit(json.dumps(load_schema(), indent=2) + "\n", args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="afcsim", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"afcsim {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def cfg_args(p):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--preset", choices=sorted(PRESETS), default="default")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("plan", help="emit the channel plan")
    cfg_args(p)
    p.add_argument("--comb-spacing", type=float, default=15.0, help="GHz")
    p.add_argument("--chirp-span", type=float, default=10.0, help="GHz")
    p.add_argument("--n-channels", type=int, default=5)
    p.add_argument("--reference-nm", type=float, default=1531.88)
    p.add_argument("--out")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("run", help="simulate and analyse one configuration")
    cfg_args(p)
    p.add_argument("--trains", type=_count)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output directory for report.json and CSVs")
    p.add_argument("--dump-tags", help="write all tags to this file (.bin for binary)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="storage-time sweep")
    cfg_args(p)
    p.add_argument("--deltas", default="200,100,20,10,4.35", help="tooth spacings in MHz")
    p.add_argument("--trains", help="trains per point (one value or one per delta)")
    p.add_argument("--reference-trains", type=_count)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="CSV table")
    p.add_argument("--json", help="full sweep result as JSON")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="g2 matrix from tag files")
    p.add_argument("tags", nargs="+")
    p.add_argument("--signal-detectors", required=True)
    p.add_argument("--idler-detectors", required=True)
    p.add_argument("--signal-offsets", help="gate centre per signal detector, ps from trial start")
    p.add_argument("--idler-offsets", help="gate centre per idler detector, ps from trial start")
    p.add_argument("--window", type=int, default=300, help="half width of the gate, ps")
    p.add_argument("--trials", type=_count, help="trial count m (default: max trial + 1)")
    p.add_argument("--sigma", choices=["poisson", "montecarlo"], default="poisson")
    p.add_argument("--out")
    p.add_argument("--counts")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("fit", help="fit a model to a two-column CSV")
    p.add_argument("model", choices=sorted(FITTERS))
    p.add_argument("csv")
    p.add_argument("--weighted", action="store_true", help="use a third column as sigma")
    p.add_argument("--out")
    p.add_argument("--curve", help="CSV of the fitted curve")
    p.add_argument("--points", type=int, default=200)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("oracle", help="closed-form predictions")
    p.add_argument("what", choices=["g2-snr", "budget", "crosstalk", "invert-crosstalk", "config"])
    cfg_args(p)
    p.add_argument("--eta-c", type=float, default=0.0354)
    p.add_argument("--snr", type=float, default=float("inf"))
    p.add_argument("--eta-s", type=float, default=0.01)
    p.add_argument("--eta-i", type=float, default=0.1751)
    p.add_argument("--eta-n", type=float, default=0.0)
    p.add_argument("--matrix", default="[[0.9,0.1],[0.1,0.9]]", help="leakage matrix as JSON")
    p.add_argument("--p", help="pair probabilities, comma separated")
    p.add_argument("--g2", type=float, default=1.0)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("schema", help="print the configuration JSON schema")
    p.add_argument("--out")
    p.set_defaults(func=cmd_schema)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        for path, msg in e.errors:
            print(f"config error at {path or '<root>'}: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except UndefinedEstimateError as e:
        print(f"undefined: {e}", file=sys.stderr)
        return EXIT_UNDEFINED


if __name__ == "__main__":
    sys.exit(main())
