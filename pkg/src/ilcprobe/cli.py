"""Command-line harness: ``ilcprobe <stage> --config cfg.json --out dir``.

Exit codes: 0 success, 2 invalid config, 3 missing artifact, 4 numerical
failure, 1 for anything unexpected. Errors are reported as one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline as pl
from .errors import ConfigError, DivergenceError, FormatError, ILCError, MissingArtifact, NumericalError

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ilcprobe", description="Intermediate-layer probing experiments on synthetic shifts.")
    p.add_argument("stage", choices=pl.STAGES + ["run", "init-config"],
                   help="pipeline stage; 'run' executes all stages, 'init-config' prints a default config")
    p.add_argument("--config", help="JSON config file (defaults are used for missing keys)")
    p.add_argument("--dataset", default=None, choices=sorted(pl.DATASET_DEFAULTS),
                   help="base defaults when no config file is given")
    p.add_argument("--out", default="runs/default", help="output directory for tables and reports")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for probe sweeps")
    p.add_argument("--seed", type=int, default=None, help="override root_seed")
    p.add_argument("--scenario", choices=["zero-shot", "few-shot", "both"], default=None)
    p.add_argument("--pi", default=None, help="comma-separated OOD fractions for few-shot, e.g. 0.03,0.05,1")
    p.add_argument("--max-layer", type=int, default=None, help="upper bound for layer selection")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, value parsed as JSON (repeatable)")
    return p


def _merge(base: dict, extra: dict):
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict) and k != "group_class_map":
            _merge(base[k], v)
        else:
            base[k] = v
    return base


def resolve_config(args) -> dict:
    user = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise MissingArtifact(f"config file {path} not found")
        try:
            user = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}", "config") from exc
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object", "config")
    gen = args.dataset or (user.get("dataset") or {}).get("generator", "conditional")
    cfg = _merge(pl.default_config(gen), user)
    for text in args.overrides:
        key, value = pl.parse_override(text)
        pl.set_dotted(cfg, key, value)
    if args.seed is not None:
        cfg["root_seed"] = args.seed
    if args.scenario:
        cfg["scenario"] = args.scenario
    if args.pi:
        try:
            cfg["pis"] = [float(x) for x in args.pi.split(",")]
        except ValueError as exc:
            raise ConfigError(f"bad --pi value {args.pi!r}", "pis") from exc
    if args.max_layer is not None:
        cfg["max_layer"] = args.max_layer
    return pl.validate_config(cfg)


def _fail(code, exc, field=None):
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if field:
        payload["field"] = field
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.stage == "init-config":
            print(json.dumps(cfg, indent=2, sort_keys=True))
            return EXIT_OK
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1", "jobs")
        art = pl.Artifacts(cfg, args.out)
        art.out.mkdir(parents=True, exist_ok=True)
        (art.out / "config.resolved.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
        stages = pl.STAGES if args.stage == "run" else [args.stage]
        for s in stages:
            pl.run_stage(s, cfg, art, jobs=args.jobs)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc, exc.field)
    except (MissingArtifact, FormatError) as exc:
        # unreadable or corrupt artifacts count as missing
        return _fail(EXIT_MISSING, exc)
    except (DivergenceError, NumericalError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, exc)
    except ILCError as exc:
        return _fail(EXIT_CONFIG, exc)
    except Exception as exc:  # unexpected: still report machine-readably
        return _fail(EXIT_INTERNAL, exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
