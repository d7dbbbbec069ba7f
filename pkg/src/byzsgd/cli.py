"""Command-line entry point: ``byzsgd run | sweep | verify``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import yaml

from .config import ConfigError, config_from_dict, load_config, render_config
from .report import plot_run, plot_sweep, sweep_table, write_summary, write_table, write_trace
from .simulator import run

OUT_ENV = "BYZSGD_OUT"
DEFAULT_OUT = "byzsgd_out"

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("byzsgd")


def schema_text() -> str:
    return resources.files("byzsgd").joinpath("config_schema.yaml").read_text(encoding="utf-8")


def _out_dir(arg: str | None) -> Path:
    return Path(arg or os.environ.get(OUT_ENV) or DEFAULT_OUT)


def _prepare(out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)


# -- run ----------------------------------------------------------------------

def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    out = _out_dir(args.out)
    _prepare(out)
    log.info("running %s/%s/%s for T=%d (seed %d)", cfg.objective, cfg.attack.kind, cfg.defense.kind, cfg.T, cfg.seed)
    result = run(cfg, threads=args.threads)
    write_trace(out / "trace.csv", result.records, cfg.m)
    write_summary(out / "summary.json", result.summary)
    (out / "config.yaml").write_text(render_config(cfg), encoding="utf-8")
    if not args.no_figures:
        plot_run(result.records, result.summary, out)
    s = result.summary
    log.info("%s after %d iterations: ||grad f|| = %s, caught %d, honest ejected %s -> %s",
             s["status"], s["iterations"], s["final_grad_norm"], s["caught_count"], s["honest_ejected"], out)
    return EXIT_OK


# -- sweep --------------------------------------------------------------------

def _entry(item: Any, what: str) -> tuple[str, str, dict]:
    """Normalise a grid entry to ``(label, name, params)``."""
    if isinstance(item, str):
        return item, item, {}
    if not isinstance(item, dict) or "name" not in item:
        raise ConfigError(what, f"entries must be a name or a mapping with 'name', got {item!r}")
    unknown = set(item) - {"name", "params", "label"}
    if unknown:
        raise ConfigError(what, f"unknown entry keys {sorted(unknown)}")
    params = dict(item.get("params") or {})
    label = item.get("label")
    if not label:
        label = item["name"] + ("(" + ",".join(f"{k}={v}" for k, v in sorted(params.items())) + ")" if params else "")
    return str(label), item["name"], params


def load_grid(path: str | Path) -> tuple[dict, list, list, list[int]]:
    with open(path, encoding="utf-8") as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError("<document>", f"not valid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("<document>", "expected a key/value mapping")
    unknown = set(raw) - {"base", "attacks", "defenses", "seeds"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown sweep key")
    for key in ("base", "attacks", "defenses"):
        if key not in raw:
            raise ConfigError(key, "missing required sweep key")
    if not isinstance(raw["base"], dict):
        raise ConfigError("base", "expected a mapping")
    attacks = [_entry(a, "attacks") for a in raw["attacks"]]
    defenses = [_entry(d, "defenses") for d in raw["defenses"]]
    seeds = raw.get("seeds", [raw["base"].get("seed", 0)])
    if not isinstance(seeds, list) or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("seeds", "expected a list of non-negative integers")
    for key, entries in (("attacks", attacks), ("defenses", defenses)):
        labels = [e[0] for e in entries]
        if len(set(labels)) != len(labels):
            raise ConfigError(key, "duplicate labels; give entries a distinct 'label'")
    return raw["base"], attacks, defenses, seeds


def cell_document(base: dict, attack: tuple, defense: tuple, seed: int) -> dict:
    doc = dict(base)
    doc["attack"], doc["attack_params"] = attack[1], attack[2] or base.get("attack_params")
    doc["defense"], doc["defense_params"] = defense[1], defense[2] or base.get("defense_params")
    doc["seed"] = seed
    return {k: v for k, v in doc.items() if v is not None}


def run_cell(job: tuple[str, str, int, dict]) -> dict:
    """Run one grid cell; failures are returned as a status, never raised."""
    dlabel, alabel, seed, doc = job
    cell: dict[str, Any] = {"defense": dlabel, "attack": alabel, "seed": seed}
    try:
        cfg = config_from_dict(doc)
    except ConfigError as exc:
        return {**cell, "status": "invalid", "error": str(exc)}
    try:
        s = run(cfg).summary
    except Exception as exc:  # noqa: BLE001 - a broken cell must not abort the sweep
        return {**cell, "status": "error", "error": f"{type(exc).__name__}: {exc}"}
    return {**cell, "status": s["status"], "final_grad_norm": s["final_grad_norm"],
            "caught_count": s["caught_count"], "honest_ejected": s["honest_ejected"],
            "sosp_fraction": s["sosp_fraction"]}


def cmd_sweep(args: argparse.Namespace) -> int:
    base, attacks, defenses, seeds = load_grid(args.config)
    if args.seed is not None:
        seeds = [args.seed]
    out = _out_dir(args.out)
    _prepare(out)
    jobs = [(d[0], a[0], s, cell_document(base, a, d, s)) for d in defenses for a in attacks for s in seeds]
    log.info("sweeping %d defenses x %d attacks x %d seeds", len(defenses), len(attacks), len(seeds))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            cells = list(pool.map(run_cell, jobs))
    else:
        cells = [run_cell(j) for j in jobs]
    rows = sweep_table(cells, [d[0] for d in defenses], [a[0] for a in attacks])
    write_table(out / "sweep.csv", rows)
    (out / "cells.json").write_text(json.dumps(cells, indent=2, allow_nan=False) + "\n", encoding="utf-8")
    if not args.no_figures:
        plot_sweep(rows, out / "sweep.png")
    for c in cells:
        if c["status"] in ("invalid", "error"):
            log.warning("cell %s / %s seed %d %s: %s", c["defense"], c["attack"], c["seed"], c["status"], c["error"])
    log.info("wrote %s", out / "sweep.csv")
    return EXIT_OK


# -- verify -------------------------------------------------------------------

def cmd_verify(args: argparse.Namespace) -> int:
    from .acceptance import run_all

    results = run_all(echo=None if args.quiet else print)
    passed = sum(r.passed for r in results)
    if args.out or os.environ.get(OUT_ENV):
        out = _out_dir(args.out)
        _prepare(out)
        rows = [["criterion", "name", "passed", "seconds", "budget", "detail"]]
        rows += [[str(r.number), r.name, str(r.passed).lower(), f"{r.seconds:.2f}",
                  "" if r.budget is None else f"{r.budget:g}", r.detail] for r in results]
        write_table(out / "verify.csv", rows)
    if not args.quiet:
        print(f"{passed}/{len(results)} criteria passed")
    return EXIT_OK if passed == len(results) else EXIT_FAILED


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", metavar="DIR", help=f"output directory (default: ${OUT_ENV} or ./{DEFAULT_OUT})")
    common.add_argument("--seed", type=int, metavar="N", help="override the configured seed")
    common.add_argument("--quiet", action="store_true", help="only print warnings and errors")

    parser = argparse.ArgumentParser(
        prog="byzsgd",
        description="Byzantine-resilient SGD simulation lab.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=(f"Outputs go to --out, else ${OUT_ENV}, else ./{DEFAULT_OUT}.\n\n"
                "Configuration schema (also shipped as byzsgd/config_schema.yaml):\n\n" + schema_text()),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="run one experiment; writes trace.csv, summary.json, figures")
    p.add_argument("--config", required=True, metavar="PATH", help="experiment YAML")
    p.add_argument("--threads", type=int, default=1, help="threads for per-worker gradient evaluation")
    p.add_argument("--no-figures", action="store_true", help="skip the PNG figures")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", parents=[common], help="run an attack x defense x seed grid; writes sweep.csv")
    p.add_argument("--config", required=True, metavar="PATH", help="sweep YAML (base, attacks, defenses, seeds)")
    p.add_argument("--jobs", type=int, default=1, help="cells run concurrently in this many processes")
    p.add_argument("--no-figures", action="store_true", help="skip the heatmap")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", parents=[common], help="run the acceptance suite; exit 0 iff every check passes")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s",
                        stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error in %s: %s", getattr(args, "config", "?"), exc)
    except OSError as exc:
        log.error("I/O error: %s", exc)
    return EXIT_USAGE

