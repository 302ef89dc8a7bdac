"""``precor`` command line.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
The default output root is ``$PRECOR_OUT`` (else ``./runs``), with one
subdirectory per config ``name``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import experiment as ex
from .config import load_config
from .errors import ConfigError, PrecorError

COMMANDS = ("generate", "factorize", "train", "evaluate", "spectrum", "generalize", "ablate")
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="precor", description="Learned corrections to incomplete Cholesky preconditioners")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="experiment JSON file")
    p.add_argument("--checkpoint", help="model checkpoint (train writes it, evaluate/spectrum/generalize read it)")
    p.add_argument("--out", help="run directory (default: $PRECOR_OUT/<name> or ./runs/<name>)")
    p.add_argument("--workers", type=int, default=None, help="worker processes for per-system work")
    p.add_argument("--seed", type=int, default=None, help="override the dataset seed")
    p.add_argument("-q", "--quiet", action="store_true")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg, raw = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        out = Path(args.out) if args.out else Path(os.environ.get("PRECOR_OUT", "runs")) / cfg.name
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(raw)
        (out / "config.resolved.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        workers = args.workers if args.workers is not None else ex.default_workers()
        if workers < 1:
            raise ConfigError("--workers must be at least 1")
        ckpt = args.checkpoint
        if ckpt is not None and args.command in ("evaluate", "spectrum", "generalize") and not Path(ckpt).exists():
            raise ConfigError(f"{ckpt}: checkpoint not found")
        if args.command == "generate":
            result = ex.cmd_generate(cfg, out, workers)
        elif args.command == "factorize":
            result = ex.cmd_factorize(cfg, out)
        elif args.command == "train":
            result = ex.cmd_train(cfg, out, ckpt)
        elif args.command == "evaluate":
            result = ex.cmd_evaluate(cfg, out, ckpt, workers)
        elif args.command == "spectrum":
            result = ex.cmd_spectrum(cfg, out, ckpt)
        elif args.command == "generalize":
            result = ex.cmd_generalize(cfg, out, ckpt, workers)
        else:
            result = ex.cmd_ablate(cfg, out, workers)
    except (ConfigError, ValueError) as exc:
        print(f"precor: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PrecorError, ArithmeticError) as exc:
        print(f"precor: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(result)
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
