"""Command-line entry point: ``trmlab <subcommand> [flags]``.

Parameters resolve as flags > ``--config`` file > built-in defaults. Data files
carry the config hash, root seed and package version; wall-clock time only
goes to ``metadata.json``.

Exit codes: 0 success, 1 an invariant was violated (repro bundles written
under ``<output>/repro``), 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .bounds import bounds_table
from .counterexamples import concentrated_sweep
from .perturbation import KINDS, PerturbationSpec, mismatch_profile, perturb
from .serialization import config_hash, dumps, load_json, pair_from_dict, save_json, to_jsonable
from .sweep import PAIR_KINDS, SweepCell, acceptance_cells, check_pair, dominance_sweep
from .tabular import BudgetExceeded, ProblemShape, build_context_tree, random_rewards, random_softmax_policy
from .trm import MODES, TRMConfig, estimator_table, trm_training_loop

log = logging.getLogger("trmlab")

CONFIG_SCHEMA = "trmlab.config"
CONFIG_VERSION = 1

# name -> (type, default); None defaults mean "optional"
PARAMS = {
    "bounds-table": {
        "horizon": (int, 4096),
        "kl_tok_max": (float, 1e-4),
        "kl_seq": (float, 0.01),
        "format": (str, "csv"),
    },
    "verify": {
        "pairs": (int, 1000),
        "vocab": (int, 2),
        "horizon": (int, 4),
        "scale": (float, 0.3),
        "kind": (str, "softmax"),
        "seed": (int, 7),
        "grid": (str, "single"),
        "format": (str, "json"),
    },
    "counterexample": {
        "eps": (list, [0.1, 0.01, 0.001]),
        "hot_kl": (float, 1.0),
        "vocab": (int, 2),
        "horizon": (int, 3),
        "seed": (int, 0),
        "format": (str, "csv"),
    },
    "trm-run": {
        "vocab": (int, 2),
        "horizon": (int, 4),
        "prompts": (int, 1),
        "roll_scale": (float, 1.0),
        "init_sigma": (float, 0.0),
        "delta": (float, 1e-2),
        "delta_avg": (float, None),
        "mode": (str, "exact"),
        "lr": (float, 0.05),
        "steps": (int, 100),
        "batch_size": (int, 64),
        "seed": (int, 0),
        "format": (str, "jsonl"),
    },
    "estimators": {
        "rho": (list, [0.5, 1.0, 2.0, 10.0, 100.0]),
        "format": (str, "csv"),
    },
    "profile": {
        "vocab": (int, 2),
        "horizon": (int, 4),
        "kind": (str, "routing_flip"),
        "sigma": (float, 1e-3),
        "flip_prob": (float, 0.3),
        "collapse_factor": (float, 0.9),
        "hard": (bool, False),
        "k_steps": (int, 3),
        "seed": (int, 0),
        "format": (str, "csv"),
    },
}


class ConfigError(ValueError):
    pass


def _coerce(where: str, typ, value):
    if value is None:
        return None
    try:
        if typ is list:
            if isinstance(value, str):
                return [float(v) for v in value.split(",") if v.strip()]
            return [float(v) for v in value]
        if typ is bool:
            if isinstance(value, bool):
                return value
            raise TypeError
        if typ is int and isinstance(value, float) and not value.is_integer():
            raise TypeError
        return typ(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: expected {typ.__name__}, got {value!r}") from None


def resolve_params(command: str, flags: dict, config_path: str | None) -> dict:
    spec = PARAMS[command]
    params = {k: d for k, (_, d) in spec.items()}
    if config_path:
        try:
            doc = load_json(config_path)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"{config_path}: {e}") from None
        if doc.get("schema") != CONFIG_SCHEMA:
            raise ConfigError(f"{config_path}: schema must be {CONFIG_SCHEMA!r}")
        if doc.get("version") != CONFIG_VERSION:
            raise ConfigError(f"{config_path}: unsupported version {doc.get('version')!r}")
        if doc.get("subcommand", command) != command:
            raise ConfigError(f"{config_path}.subcommand: {doc['subcommand']!r} does not match {command!r}")
        file_params = doc.get("params", {})
        for k, v in file_params.items():
            if k not in spec:
                raise ConfigError(f"{config_path}.params.{k}: unknown parameter for {command}")
            params[k] = _coerce(f"{config_path}.params.{k}", spec[k][0], v)
    for k, v in flags.items():
        if v is not None:
            params[k] = _coerce(f"--{k.replace('_', '-')}", spec[k][0], v)
    return params


def _fmt(x):
    if isinstance(x, float):
        return format(x, ".17g")
    return x


def _csv(rows: list[dict], header: str) -> str:
    buf = io.StringIO()
    buf.write(f"# {header}\n")
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})
    return buf.getvalue()


class Run:
    """Output handling shared by every subcommand."""

    def __init__(self, command: str, params: dict, output: str | None):
        self.command = command
        self.params = params
        self.output = Path(output) if output else None
        self.hash = config_hash({"subcommand": command, "params": params})
        self.seed = params.get("seed")
        if self.output:
            self.output.mkdir(parents=True, exist_ok=True)

    @property
    def provenance(self) -> dict:
        return {"config_hash": self.hash, "seed": self.seed, "version": __version__, "subcommand": self.command}

    def header(self) -> str:
        return f"trmlab {__version__} {self.command} config={self.hash} seed={self.seed}"

    def emit(self, name: str, text: str) -> None:
        if self.output is None:
            sys.stdout.write(text)
        else:
            (self.output / name).write_text(text)
            log.info("wrote %s", self.output / name)

    def emit_rows(self, name: str, rows: list[dict], fmt: str) -> None:
        if fmt == "csv":
            self.emit(name + ".csv", _csv(rows, self.header()))
        elif fmt == "json":
            self.emit(name + ".json", dumps({"provenance": self.provenance, "rows": rows}) + "\n")
        else:
            raise ConfigError(f"--format: {fmt!r} not supported here (csv or json)")

    def finish(self, argv, exit_code: int, started: float) -> None:
        if self.output is None:
            return
        save_json(
            self.output / "metadata.json",
            {
                **self.provenance,
                "params": self.params,
                "argv": list(argv),
                "started_unix": started,
                "elapsed_s": time.time() - started,
                "exit_code": exit_code,
            },
        )


def cmd_bounds_table(p: dict, run: Run) -> int:
    rows = bounds_table(p["horizon"], p["kl_tok_max"], p["kl_seq"])
    for r in rows:
        r["value_rounded"] = f"{r['value']:.1f}"
        r.update(horizon=p["horizon"], kl_tok_max=p["kl_tok_max"], kl_seq=p["kl_seq"])
    run.emit_rows("bounds_table", rows, p["format"])
    return 0


def _write_bundles(run: Run, bundles: list[dict]) -> None:
    if not bundles:
        return
    if run.output is None:
        for b in bundles:
            log.error("violation %s in cell %s pair %s", b["failures"], b["cell"], b["index"])
        return
    repro = run.output / "repro"
    repro.mkdir(exist_ok=True)
    for i, b in enumerate(bundles):
        save_json(repro / f"violation_{i:04d}.json", b)


def cmd_verify(p: dict, run: Run, workers: int, repro: str | None) -> int:
    if repro:
        bundle = load_json(repro)
        res = check_pair(*pair_from_dict(bundle))
        run.emit("repro_check.json", dumps({"provenance": run.provenance, "failures": res.failures, **res.row()}) + "\n")
        return 1 if res.failures else 0
    if p["kind"] not in PAIR_KINDS:
        raise ConfigError(f"--kind: {p['kind']!r} not in {PAIR_KINDS}")
    if p["grid"] == "acceptance":
        cells = acceptance_cells(p["seed"])
    elif p["grid"] == "single":
        cells = [SweepCell(p["vocab"], p["horizon"], p["scale"], p["pairs"], p["seed"], kind=p["kind"])]
    else:
        raise ConfigError(f"--grid: {p['grid']!r} must be 'single' or 'acceptance'")
    summary = dominance_sweep(cells, workers=workers)
    log.info("verify: %d pairs, %d violations", summary.n_pairs, len(summary.violations))
    run.emit("summary.json", dumps({"provenance": run.provenance, **summary.to_dict()}) + "\n")
    if run.output is not None:
        run.emit_rows("pairs", summary.rows, "csv")
    _write_bundles(run, summary.violations)
    return 0 if summary.ok else 1


def cmd_counterexample(p: dict, run: Run) -> int:
    shape = ProblemShape(p["vocab"], p["horizon"])
    rows = concentrated_sweep(p["eps"], p["hot_kl"], shape, reward_seed=p["seed"])
    run.emit_rows("counterexample", rows, p["format"])
    return 0


def cmd_trm_run(p: dict, run: Run) -> int:
    if p["mode"] not in MODES:
        raise ConfigError(f"--mode: {p['mode']!r} not in {MODES}")
    config = TRMConfig(
        vocab_size=p["vocab"],
        horizon=p["horizon"],
        n_prompts=p["prompts"],
        roll_scale=p["roll_scale"],
        init_sigma=p["init_sigma"],
        delta=p["delta"],
        delta_avg=p["delta_avg"],
        mode=p["mode"],
        learning_rate=p["lr"],
        steps=p["steps"],
        batch_size=p["batch_size"],
        seed=p["seed"],
    )
    trace = trm_training_loop(config)
    lines = [json.dumps(to_jsonable({"provenance": run.provenance}), sort_keys=True)]
    lines += [json.dumps(to_jsonable(r), sort_keys=True) for r in trace]
    run.emit("trace.jsonl", "\n".join(lines) + "\n")
    bad = [r["step"] for r in trace if r["violation"] or r["soundness_violations"]]
    if bad:
        log.error("trm-run: invariant violated at steps %s", bad)
        if run.output is not None:
            # the full config reproduces the run: rerun with --config <this file>
            (run.output / "repro").mkdir(exist_ok=True)
            bundle = {"schema": CONFIG_SCHEMA, "version": CONFIG_VERSION, "subcommand": "trm-run", "params": p}
            save_json(run.output / "repro" / "trm_config.json", bundle)
        return 1
    return 0


def cmd_estimators(p: dict, run: Run) -> int:
    rows = estimator_table(tuple(p["rho"]))
    for r in rows:
        r.update({f"{k}_rounded": f"{r[k]:.2f}" for k in ("k1", "k3", "abs_log")})
    run.emit_rows("estimators", rows, p["format"])
    return 0


def cmd_profile(p: dict, run: Run) -> int:
    if p["kind"] not in KINDS:
        raise ConfigError(f"--kind: {p['kind']!r} not in {KINDS}")
    tree = build_context_tree(ProblemShape(p["vocab"], p["horizon"]))
    roll = random_softmax_policy(tree, 1.0, p["seed"])
    rewards = random_rewards(tree, p["seed"] + 1)
    spec = PerturbationSpec(
        kind=p["kind"],
        sigma=p["sigma"],
        flip_prob=p["flip_prob"],
        collapse_factor=p["collapse_factor"],
        hard=p["hard"],
        k_steps=p["k_steps"],
        seed=p["seed"],
    )
    prof = mismatch_profile(roll, perturb(roll, spec, rewards))
    run.emit_rows("profile_histogram", prof.histogram_rows(), p["format"])
    if run.output is not None:
        run.emit_rows("profile_mask_rate", prof.curve_rows(), p["format"])
        run.emit(
            "profile_summary.json",
            dumps(
                {
                    "provenance": run.provenance,
                    "median_kl": prof.median_kl,
                    "max_kl": prof.max_kl,
                    "rho_max": prof.rho_max,
                    "rho_min": prof.rho_min,
                }
            )
            + "\n",
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="trmlab", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file (flags override it)")
        sp.add_argument("--output", "-o", help="output directory; stdout when omitted")
        sp.add_argument("--format", choices=("csv", "json", "jsonl"))
        sp.add_argument("-v", "--verbose", action="store_true")

    sp = sub.add_parser("bounds-table", help="Classical / Pinsker-Marginal / Mixed bound values")
    common(sp)
    sp.add_argument("--horizon", "-T", type=int)
    sp.add_argument("--kl-tok-max", type=float)
    sp.add_argument("--kl-seq", type=float)

    sp = sub.add_parser("verify", help="brute-force bound dominance over random pairs")
    common(sp)
    sp.add_argument("--pairs", type=int)
    sp.add_argument("--vocab", type=int)
    sp.add_argument("--horizon", type=int)
    sp.add_argument("--scale", type=float)
    sp.add_argument("--kind", choices=PAIR_KINDS)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--grid", choices=("single", "acceptance"))
    sp.add_argument("--workers", type=int, default=1, help="processes; output does not depend on it")
    sp.add_argument("--repro", help="re-check a violation bundle written by an earlier run")

    sp = sub.add_parser("counterexample", help="concentrated-divergence epsilon sweep")
    common(sp)
    sp.add_argument("--eps", help="comma-separated epsilons")
    sp.add_argument("--hot-kl", type=float)
    sp.add_argument("--vocab", type=int)
    sp.add_argument("--horizon", type=int)
    sp.add_argument("--seed", type=int)

    sp = sub.add_parser("trm-run", help="Trust Region Masking training run, JSONL trace")
    common(sp)
    sp.add_argument("--vocab", type=int)
    sp.add_argument("--horizon", type=int)
    sp.add_argument("--prompts", type=int)
    sp.add_argument("--roll-scale", type=float)
    sp.add_argument("--init-sigma", type=float)
    sp.add_argument("--delta", type=float)
    sp.add_argument("--delta-avg", type=float)
    sp.add_argument("--mode", choices=MODES)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--seed", type=int)

    sp = sub.add_parser("estimators", help="k1 / k3 / |log rho| table")
    common(sp)
    sp.add_argument("--rho", help="comma-separated ratios")

    sp = sub.add_parser("profile", help="mismatch profile of a perturbed pair")
    common(sp)
    sp.add_argument("--vocab", type=int)
    sp.add_argument("--horizon", type=int)
    sp.add_argument("--kind", choices=KINDS)
    sp.add_argument("--sigma", type=float)
    sp.add_argument("--flip-prob", type=float)
    sp.add_argument("--collapse-factor", type=float)
    sp.add_argument("--hard", action="store_true", default=None)
    sp.add_argument("--k-steps", type=int)
    sp.add_argument("--seed", type=int)
    return ap


_NON_PARAM = {"command", "config", "output", "verbose", "workers", "repro"}


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    flags = {k: v for k, v in vars(args).items() if k not in _NON_PARAM}
    started = time.time()
    try:
        params = resolve_params(args.command, flags, args.config)
        r = Run(args.command, params, args.output)
        if args.command == "bounds-table":
            code = cmd_bounds_table(params, r)
        elif args.command == "verify":
            code = cmd_verify(params, r, args.workers, args.repro)
        elif args.command == "counterexample":
            code = cmd_counterexample(params, r)
        elif args.command == "trm-run":
            code = cmd_trm_run(params, r)
        elif args.command == "estimators":
            code = cmd_estimators(params, r)
        else:
            code = cmd_profile(params, r)
    except (ConfigError, BudgetExceeded, ValueError) as e:
        print(f"trmlab {args.command}: {e}", file=sys.stderr)
        return 2
    r.finish(argv, code, started)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
