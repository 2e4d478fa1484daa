"""Command line interface.

Exit codes: 0 converged / completed, 2 stopped by an iteration or work cap,
1 error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import load_config
from .driver import (
    adaptive_run,
    load_surrogate,
    position_adaptive_run,
    reconstruct,
    reliability_csv,
    reliability_study,
    write_artifacts,
    write_text,
)
from .exceptions import GPDesignError

EXIT_OK, EXIT_ERROR, EXIT_CAP = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gpdesign", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name, text in [
        ("run", "adaptive design with accuracy allocation"),
        ("baseline", "position-adaptive design at a fixed tolerance"),
        ("reliability", "compare estimated and observed parameter errors"),
        ("reconstruct", "MAP estimate and Laplace uncertainty on the surrogate"),
    ]:
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--max-work", type=float, help="override the total work cap")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "baseline":
            p.add_argument("--eps", type=float, help="fixed evaluation tolerance")
        if name in ("reliability", "reconstruct"):
            p.add_argument("--from", dest="from_dir",
                           help="reuse the surrogate of a finished run instead of running one")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config).with_overrides(seed=args.seed, out=args.out, max_work=args.max_work)
        if args.command == "baseline":
            art = position_adaptive_run(cfg, args.eps)
        else:
            from_dir = getattr(args, "from_dir", None)
            if from_dir is None:
                art = adaptive_run(cfg)
                model = art.model
            else:
                art = None
                model = load_surrogate(from_dir)
            if args.command == "reliability":
                table = reliability_study(cfg, model)
                if art is not None:
                    art.reliability = table
            elif args.command == "reconstruct":
                res = reconstruct(cfg, model)
                print("p_map", " ".join(format(x, ".6g") for x in res.p_map),
                      "std", " ".join(format(x, ".3g") for x in res.stds))
                if art is not None:
                    art.reconstruction = res
            if art is None:
                _write_standalone(cfg, args.command, table if args.command == "reliability" else res)
                return EXIT_OK
        out = write_artifacts(art, cfg.out)
        print(f"{art.stop_reason}: E={art.final_error:.4g} W={art.total_work:.6g} -> {out}")
        return EXIT_OK if art.converged else EXIT_CAP
    except (GPDesignError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def _write_standalone(cfg, command, result):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if command == "reliability":
        write_text(out / "reliability.csv", reliability_csv(result))
    else:
        write_text(out / "reconstruction.json", json.dumps(result.to_dict(), indent=2) + "\n")


if __name__ == "__main__":
    sys.exit(main())
