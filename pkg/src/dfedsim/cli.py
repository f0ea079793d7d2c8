"""Command-line entry point.

Subcommands:
  run       execute one configured simulation, write records.csv + summary.json
  sweep     repeat a run across one axis (beta, K, lambda_, eta, m, topology)
  topology  inspect: print mixing-matrix diagnostics for a config as JSON
  verify    run the built-in update-algebra oracle suite
  analyze   stability twin-run probe (--stability) or rate fit on a records
            CSV (--rate)

Exit codes: 0 success, 1 check/analysis failure, 2 configuration error,
3 divergence. ``DFL_THREADS`` caps the engine's worker threads and
``DFL_BACKEND`` selects the compiled or python kernels.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

from . import analysis, engine, kernels, topology, verify
from .config import config_to_dict, load_config
from .errors import ConfigError, DfedsimError, DivergenceError
from .engine import RoundRecord

CSV_COLUMNS = ("round", "train_loss", "grad_norm_z_sq", "consensus",
               "test_accuracy", "psi_round", "elapsed_ms")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def write_records_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for rec in records:
            writer.writerow([_fmt(getattr(rec, col)) for col in CSV_COLUMNS])


def read_records_csv(path):
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != list(CSV_COLUMNS):
            raise ConfigError(f"{path}: unexpected columns {reader.fieldnames}")
        for row in reader:
            records.append(RoundRecord(
                round=int(row["round"]),
                train_loss=float(row["train_loss"]),
                grad_norm_z_sq=float(row["grad_norm_z_sq"]),
                consensus=float(row["consensus"]),
                test_accuracy=float(row["test_accuracy"]) if row["test_accuracy"] else None,
                psi_round=float(row["psi_round"]),
                elapsed_ms=float(row["elapsed_ms"]),
            ))
    return records


def _summary(cfg, records, wall_s: float) -> dict:
    last = records[-1] if records else None
    return {
        "config": config_to_dict(cfg),
        "results": {
            "rounds_recorded": len(records),
            "final_round": last.round if last else None,
            "final_train_loss": last.train_loss if last else None,
            "final_grad_norm_z_sq": last.grad_norm_z_sq if last else None,
            "final_consensus": last.consensus if last else None,
            "final_test_accuracy": last.test_accuracy if last else None,
            "wall_seconds": wall_s,
            "backend": kernels.active_backend(),
            "threads": os.environ.get("DFL_THREADS", "1"),
        },
    }


def cmd_run(args) -> int:
    cfg = load_config(args.config, overrides=args.set or ())
    os.makedirs(args.out, exist_ok=True)
    tic = time.perf_counter()
    try:
        result = engine.run(cfg)
        records = result.records
    except DivergenceError as exc:
        write_records_csv(getattr(exc, "partial_records", []), os.path.join(args.out, "records.csv"))
        print(f"error: {exc}", file=sys.stderr)
        return 3
    write_records_csv(records, os.path.join(args.out, "records.csv"))
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(_summary(cfg, records, time.perf_counter() - tic), fh, indent=2)
        fh.write("\n")
    print(f"wrote {len(records)} records to {args.out}/records.csv")
    return 0


def _parse_values(axis: str, raw: str):
    values = [v for v in raw.split(",") if v != ""]
    if axis in ("beta", "lambda_", "eta"):
        return [float(v) for v in values]
    if axis in ("K", "m"):
        return [int(v) for v in values]
    return values  # topology kinds


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, overrides=args.set or ())
    values = _parse_values(args.axis, args.values)
    if not values:
        raise ConfigError("sweep needs a non-empty --values list")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    os.makedirs(args.out, exist_ok=True)
    cells = engine.sweep(cfg, args.axis, values, seeds=seeds)
    rows = []
    failed = 0
    for cell in cells:
        label = f"{args.axis}_{cell.axis_value}"
        subdir = os.path.join(args.out, label, f"seed_{cell.seed}")
        os.makedirs(subdir, exist_ok=True)
        write_records_csv(cell.records, os.path.join(subdir, "records.csv"))
        if cell.error:
            failed += 1
            rounds = None
            final = None
        else:
            rounds = (
                engine.rounds_to_threshold(cell.records, args.metric, args.threshold)
                if args.threshold is not None
                else None
            )
            final = getattr(cell.records[-1], args.metric) if cell.records else None
        rows.append((cell.axis_value, cell.seed, rounds, final, cell.error or ""))
    with open(os.path.join(args.out, "sweep.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("axis_value", "seed", "rounds_to_threshold", "final_metric", "error"))
        for row in rows:
            writer.writerow([_fmt(v) if isinstance(v, float) else ("" if v is None else v) for v in row])
    print(f"swept {args.axis} over {values} x seeds {seeds}; {failed} failures")
    return 1 if failed else 0


def cmd_topology_inspect(args) -> int:
    cfg = load_config(args.config, overrides=args.set or ())
    spec = cfg.topology
    if spec.kind in topology.DYNAMIC_KINDS:
        graph = topology.build_graph(spec)  # round-0 sample
        mixing = topology.metropolis_weights(graph, require_connected=False)
    else:
        graph = topology.build_graph(spec)
        mixing = topology.metropolis_weights(graph)
    kappa = None
    if 0.0 < mixing.psi < 1.0:
        kappa = analysis.kappa_psi(mixing.psi, args.alpha)
    doc = {
        "kind": spec.kind,
        "m": spec.m,
        "edges": len(graph.edges),
        "connected": graph.connected,
        "psi": mixing.psi,
        "spectral_gap": mixing.spectral_gap,
        "kappa_psi": kappa,
        "kappa_alpha": args.alpha,
    }
    print(json.dumps(doc, indent=2))
    return 0


def cmd_verify(args) -> int:
    checks = verify.run_verification_suite(
        inject_mixing_defect=args.inject_mixing_defect, t_max=args.t_max
    )
    all_ok = True
    for check in checks:
        status = "PASS" if check.passed else "FAIL"
        all_ok &= check.passed
        print(
            f"[{status}] {check.name}: max deviation {check.deviation:.3e}"
            f" (tolerance {check.tolerance:.0e})"
        )
    return 0 if all_ok else 1


def cmd_analyze(args) -> int:
    if args.rate:
        records = read_records_csv(args.rate)
        doc = {"records": len(records), "rate_slope": analysis.rate_fit(records)}
    elif args.stability:
        cfg = load_config(args.config, overrides=args.set or ())
        probe = analysis.StabilityProbeConfig(
            mu_tilde=args.mu_tilde,
            perturbed_client=args.perturbed_client,
            perturbed_index=args.perturbed_index,
            probe_size=args.probe_size,
            rounds=args.rounds,
        )
        report = analysis.stability_probe(cfg, probe)
        doc = {
            "delta": report.delta.tolist(),
            "sup_loss_gap": report.sup_loss_gap.tolist(),
            "tau0_measured": report.tau0,
            "tau0_round": report.tau0_round,
            "tau0_theoretical": report.tau0_theoretical,
            "coupled_before_tau0": report.coupled_before_tau0,
            "U": report.U,
            "L_G": report.L_G,
            "L": report.L,
            "mu": report.mu,
            "rounds": report.rounds,
            "mean_psi": report.mean_psi,
        }
    else:
        raise ConfigError("analyze needs --stability or --rate <records.csv>")
    text = json.dumps(doc, indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dfedsim",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one simulation")
    p_run.add_argument("-c", "--config", required=True)
    p_run.add_argument("-o", "--out", required=True)
    p_run.add_argument("--set", action="append", metavar="PATH=VALUE",
                       help="override a config entry, e.g. hyper.beta=0.9")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run once per axis value (and seed)")
    p_sweep.add_argument("-c", "--config", required=True)
    p_sweep.add_argument("-o", "--out", required=True)
    p_sweep.add_argument("--axis", required=True, choices=engine.SWEEP_AXES)
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.add_argument("--seeds", help="comma-separated seeds (default: config seed)")
    p_sweep.add_argument("--metric", default="train_loss",
                         choices=("test_accuracy", "train_loss", "grad_norm_z_sq"))
    p_sweep.add_argument("--threshold", type=float,
                         help="threshold for the rounds_to_threshold column")
    p_sweep.add_argument("--set", action="append", metavar="PATH=VALUE")
    p_sweep.set_defaults(func=cmd_sweep)

    p_topo = sub.add_parser("topology", help="topology utilities")
    topo_sub = p_topo.add_subparsers(dest="topology_command", required=True)
    p_inspect = topo_sub.add_parser("inspect", help="print mixing diagnostics as JSON")
    p_inspect.add_argument("-c", "--config", required=True)
    p_inspect.add_argument("--alpha", type=float, default=0.5,
                           help="exponent for the spectrum-gap constant")
    p_inspect.add_argument("--set", action="append", metavar="PATH=VALUE")
    p_inspect.set_defaults(func=cmd_topology_inspect)

    p_verify = sub.add_parser("verify", help="run the update-algebra oracle suite")
    p_verify.add_argument("--inject-mixing-defect", action="store_true",
                          help=argparse.SUPPRESS)  # negative-control test hook
    p_verify.add_argument("--t-max", type=int, default=10_000,
                          help="horizon for the spectrum-constant bound check")
    p_verify.set_defaults(func=cmd_verify)

    p_an = sub.add_parser("analyze", help="stability probe or rate fit")
    p_an.add_argument("--stability", action="store_true")
    p_an.add_argument("--rate", metavar="RECORDS_CSV")
    p_an.add_argument("-c", "--config")
    p_an.add_argument("-o", "--out")
    p_an.add_argument("--mu-tilde", type=float, default=0.05)
    p_an.add_argument("--perturbed-client", type=int, default=0)
    p_an.add_argument("--perturbed-index", type=int, default=0)
    p_an.add_argument("--probe-size", type=int, default=512)
    p_an.add_argument("--rounds", type=int)
    p_an.add_argument("--set", action="append", metavar="PATH=VALUE")
    p_an.set_defaults(func=cmd_analyze)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3
    except DfedsimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
