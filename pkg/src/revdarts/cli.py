"""``revdarts <mode> --config FILE [--seed N] [--dtype f32|f64] [--out DIR] [--set k=v ...]``"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path
from typing import Optional

from .architecture import Architecture, SchemaError
from .checkpoint import ALPHA_JSON, MetricsWriter, assign_theta, load_theta, read_json, save_theta, write_json
from .config import MODES, ConfigError, RunConfig, load_config
from .data import generate_dataset
from .gradcheck import run_suite
from .profiler import profile_memory, summarize
from .search import discretize_alphas, run_search
from .seq2seq import build_derived, dims_for, evaluate, train_derived
from .tensor import DTYPES

log = logging.getLogger("revdarts")

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="revdarts", description="Reversible DARTS search, retraining and profiling.")
    p.add_argument("mode", help=f"one of {', '.join(MODES)}")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--dtype", choices=sorted(DTYPES))
    p.add_argument("--out", help="run directory (overrides paths.out)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted override, e.g. search.steps=100")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


# -- modes ----------------------------------------------------------------------------------

def _alpha_doc(path: Path) -> dict:
    if path.is_dir():
        path = path / ALPHA_JSON
    doc = read_json(path)
    if doc.get("version") != 1:
        raise SchemaError(f"version {doc.get('version')!r} is not supported (expected 1)")
    for key in ("dims", "encoder", "decoder"):
        if key not in doc:
            raise SchemaError(f"{key} is missing")
    return doc


def run_search_mode(cfg: RunConfig, out: Path) -> dict:
    net, checkpoints = run_search(cfg.search_config(), out)
    arch = discretize_alphas(json.loads((out / ALPHA_JSON).read_text(encoding="utf-8")))
    arch.save(out / "arch.json")
    return {"checkpoints": [c.step for c in checkpoints], "arch": arch.to_dict()}


def run_derive(cfg: RunConfig, out: Path) -> dict:
    doc = _alpha_doc(Path(cfg.paths.checkpoint))
    prov = {"checkpoint": str(cfg.paths.checkpoint)}
    if "step" in doc:
        prov["step"] = doc["step"]
    arch = discretize_alphas(doc, prov)
    arch.save(out / "arch.json")
    degenerate = arch.degenerate_layers()
    if degenerate:
        log.warning("layers reduced to identity (all splits chose zero): %s", ", ".join(degenerate))
    return {"arch": arch.to_dict(), "degenerate_layers": degenerate}


def run_train(cfg: RunConfig, out: Path) -> dict:
    arch = Architecture.load(cfg.paths.arch)
    arch.save(out / "arch.json")
    dataset = generate_dataset(cfg.dataset)
    dims = dims_for(arch, cfg.dims)
    writer = MetricsWriter(out / "metrics.jsonl")
    try:
        model, metrics = train_derived(arch, dataset, cfg.train_config(), dims=dims, pooling=cfg.pooling,
                                       metrics_writer=writer)
    finally:
        writer.close()
    save_theta(out, model.named_parameters())
    result = evaluate(model, dataset, "retrain_val", cfg.eval.batch_size)
    write_json(out / "eval.json", {"shard": "retrain_val", **result})
    return {"final": metrics[-1] if metrics else None, "retrain_val": result}


def run_eval(cfg: RunConfig, out: Path) -> dict:
    arch = Architecture.load(cfg.paths.arch)
    dataset = generate_dataset(cfg.dataset)
    model = build_derived(arch, dims_for(arch, cfg.dims), cfg.pooling, cfg.seed, cfg.dtype)
    assign_theta(model.named_parameters(), load_theta(cfg.paths.theta))
    result = {"shard": cfg.eval.shard, **evaluate(model, dataset, cfg.eval.shard, cfg.eval.batch_size)}
    write_json(out / "eval.json", result)
    return result


def run_gradcheck(cfg: RunConfig, out: Path) -> dict:
    results = run_suite(cfg.seed, quick=cfg.gradcheck.quick)
    for r in results:
        print(r.line())
    passed = all(r.passed for r in results)
    print("PASS" if passed else "FAIL")
    doc = {"passed": passed, "checks": [{"name": r.name, "passed": r.passed, "detail": r.detail} for r in results]}
    write_json(out / "gradcheck.json", doc)
    return doc


def run_memprofile(cfg: RunConfig, out: Path) -> dict:
    rows = profile_memory(cfg.profile_config(), out)
    return summarize(rows)


DISPATCH = {
    "search": run_search_mode,
    "derive": run_derive,
    "train": run_train,
    "eval": run_eval,
    "gradcheck": run_gradcheck,
    "memprofile": run_memprofile,
}


def run(cfg: RunConfig) -> int:
    """Execute one mode; artifacts land in ``cfg.paths.out``."""
    out = Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", cfg.to_dict())
    try:
        result = DISPATCH[cfg.mode](cfg, out)
    except Exception as exc:  # partial artifacts stay; the failure is recorded next to them
        write_json(out / "error.json", {
            "mode": cfg.mode,
            "type": type(exc).__name__,
            "message": str(exc),
            "traceback": traceback.format_exc(),
        })
        print(f"revdarts {cfg.mode}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED
    if cfg.mode == "gradcheck" and not result["passed"]:
        return EXIT_FAILED
    return EXIT_OK


def main(argv: Optional[list[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"revdarts: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.mode not in MODES:
        print(f"revdarts: mode: unknown mode {args.mode!r}; expected one of {', '.join(MODES)}", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(args.config, args.overrides, mode=args.mode, seed=args.seed, dtype=args.dtype, out=args.out)
        cfg.check_paths()
    except ConfigError as exc:
        print(f"revdarts: invalid config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
