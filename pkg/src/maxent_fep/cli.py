"""Command line entry point: ``maxent-fep run|list|check``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import metadata, resources
from pathlib import Path

from . import config as cfg
from . import diagnostics as dg
from .errors import ConfigError
from .experiments import REGISTRY, Context

log = logging.getLogger("maxent_fep")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG = 0, 1, 2
LOG_ENV = "MAXENT_FEP_LOG"
_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging():
    level = os.environ.get(LOG_ENV, "warn").lower()
    logging.basicConfig(level=_LEVELS.get(level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def resolve_config(path: str) -> Path:
    """A path on disk, or the name of a bundled scenario (with or without ``.json``)."""
    p = Path(path)
    if p.exists():
        return p
    name = p.name if p.suffix == ".json" else p.name + ".json"
    bundled = resources.files("maxent_fep") / "scenarios" / name
    if bundled.is_file():
        return Path(str(bundled))
    return p


def bundled_scenarios() -> list[str]:
    root = resources.files("maxent_fep") / "scenarios"
    return sorted(f.name for f in root.iterdir() if f.name.endswith(".json"))


def _versions() -> dict:
    def v(pkg):
        try:
            return metadata.version(pkg)
        except metadata.PackageNotFoundError:
            return "unknown"

    return {"maxent-fep": v("maxent-fep"), "numpy": v("numpy"), "scipy": v("scipy"), "numba": v("numba"), "python": platform.python_version()}


def _run_one(config: dict, config_hash: str, index: int, experiment: dict, outdir: str) -> dict:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    name, params = experiment["name"], experiment.get("params", {})
    ctx = Context(cfg.effective_config(config, experiment), config_hash)
    entry = {"index": index, "name": name}
    try:
        reports = REGISTRY[name].func(ctx, params, out)
    except Exception as exc:  # an experiment crash is a failure of that experiment, not of the run
        log.error("experiment %s failed: %s", name, exc)
        entry.update(status="error", error=f"{type(exc).__name__}: {exc}", checks=[])
        return entry
    entry["checks"] = [r.to_dict() for r in reports]
    entry["status"] = "pass" if dg.suite_exit_code(reports) == 0 else "fail"
    for r in reports:
        log.info("%s/%s: %s (slack %.3g)", name, r.name, r.status, r.slack)
    return entry


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(config_path, overrides=(), out=None, workers: int = 1) -> int:
    try:
        scenario = cfg.load(resolve_config(str(config_path)), overrides)
    except ConfigError as exc:
        print(f"config error:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG
    root = Path(out or scenario.config.get("output", "maxent-fep-out")).resolve()
    root.mkdir(parents=True, exist_ok=True)
    h = scenario.hash
    jobs = []
    for i, e in enumerate(scenario.experiments):
        sub = (root / f"{i:02d}-{e['name']}").resolve()
        if root not in sub.parents:
            print(f"config error: experiment output {sub} escapes {root}", file=sys.stderr)
            return EXIT_CONFIG
        jobs.append((scenario.config, h, i, e, str(sub)))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(_run_one, *zip(*jobs)))
    else:
        entries = [_run_one(*j) for j in jobs]
    failed = [e for e in entries if e["status"] != "pass"]
    code = EXIT_CHECK_FAILED if failed else EXIT_OK
    report = {
        "scenario": scenario.name,
        "config_hash": h,
        "exit_code": code,
        "experiments": entries,
        "failed_checks": [f"{e['name']}/{c['name']}" for e in entries for c in e["checks"] if c["status"] == "fail"]
        + [f"{e['name']}: {e['error']}" for e in entries if e["status"] == "error"],
    }
    (root / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "scenario": scenario.name,
        "config_hash": h,
        "config": scenario.config,
        "versions": _versions(),
        "files": {str(p.relative_to(root)): _sha256(p) for p in files},
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for f in report["failed_checks"]:
        print(f"FAILED {f}", file=sys.stderr)
    print(f"{scenario.name}: {len(entries)} experiment(s), {len(failed)} failed; outputs in {root}")
    return code


def list_experiments() -> str:
    width = max(len(n) for n in REGISTRY)
    lines = [f"{e.name:<{width}}  {e.description}  [{e.anchor}]" for e in REGISTRY.values()]
    lines.append("")
    lines.append("bundled scenarios: " + ", ".join(bundled_scenarios()))
    return "\n".join(lines)


def check(config_path, overrides=()) -> int:
    try:
        scenario = cfg.load(resolve_config(str(config_path)), overrides)
    except ConfigError as exc:
        print(f"config error:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"{scenario.name}: ok ({len(scenario.experiments)} experiment(s), hash {scenario.hash[:12]})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maxent-fep", description="Constrained maximum entropy and free-energy experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the experiments of a scenario config")
    r.add_argument("config")
    r.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="dotted-path override, repeatable")
    r.add_argument("--out", help="output directory (overrides the config's 'output')")
    r.add_argument("--workers", type=int, default=1, help="experiments run concurrently (default 1)")
    sub.add_parser("list", help="list experiments and bundled scenarios")
    c = sub.add_parser("check", help="validate a config without running it")
    c.add_argument("config")
    c.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if args.command == "run":
        if args.workers < 1:
            print("config error: --workers must be >= 1", file=sys.stderr)
            return EXIT_CONFIG
        return run(args.config, args.overrides, args.out, args.workers)
    if args.command == "list":
        print(list_experiments())
        return EXIT_OK
    return check(args.config, args.overrides)


if __name__ == "__main__":
    sys.exit(main())
