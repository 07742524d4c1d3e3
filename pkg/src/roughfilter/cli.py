"""Command line front end.

Exit codes: 0 pass, 1 a quantitative gate failed (or the run blew up),
2 unusable configuration or invalid run, 3 inconclusive (not enough
signal above the Monte Carlo floor).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import experiments
from .config import config_from_dict, load_config
from .errors import (BlowUpError, CapabilityError, ConfigurationError,
                     DegenerateMassError, DimensionError, InvalidRunError)

COMMANDS = {
    "lift": experiments.exp_lift,
    "filter": experiments.exp_filter,
    "zakai": experiments.exp_zakai,
    "ks": experiments.exp_ks,
    "mass": experiments.exp_mass,
    "duality": experiments.exp_duality,
    "robustness": experiments.exp_robustness,
    "randomize": experiments.exp_randomize,
    "kalman": experiments.exp_kalman,
    "degenerate": experiments.exp_degenerate,
}


def _int_list(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part]


def _str_list(text: str) -> list[str]:
    return [part for part in text.split(",") if part]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="roughfilter",
        description="Rough-path particle filtering experiments")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sp = sub.add_parser(name, help=fn.__doc__)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--model")
        sp.add_argument("--steps", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--particles", type=int)
        sp.add_argument("--alpha", type=float)
        sp.add_argument("--refine", type=int)
        sp.add_argument("--horizon", type=float)
        sp.add_argument("--driver", choices=["ito", "piecewise_linear",
                                             "geometrified", "file"])
        sp.add_argument("--driver-file", dest="driver_file")
        sp.add_argument("--bm-substeps", dest="bm_substeps", type=int)
        sp.add_argument("--phis", type=_str_list,
                        help="comma-separated test function names")
        sp.add_argument("--spans", type=_int_list,
                        help="comma-separated window sizes in steps")
        sp.add_argument("--checkpoints", type=int)
        sp.add_argument("--grid-points", dest="grid_points", type=int)
        sp.add_argument("--inner-particles", dest="inner_particles", type=int)
        sp.add_argument("--threads", type=int)
        sp.add_argument("--out", help="output directory "
                                      "(default: $ROUGHFILTER_OUT if set)")
    return p


_OVERRIDES = ("model", "steps", "seed", "particles", "alpha", "refine",
              "horizon", "driver", "driver_file", "bm_substeps", "phis",
              "spans", "checkpoints", "grid_points", "inner_particles",
              "threads", "out")


def config_from_args(args: argparse.Namespace):
    if args.config:
        base = load_config(args.config)
        data = json.loads(base.canonical())
    else:
        data = {}
    for name in _OVERRIDES:
        value = getattr(args, name, None)
        if value is not None:
            data[name] = value
    if data.get("out") is None:
        env = os.environ.get("ROUGHFILTER_OUT")
        if env:
            data["out"] = env
    data = {k: v for k, v in data.items() if v is not None}
    return config_from_dict(data)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
        report = COMMANDS[args.command](cfg)
    except (ConfigurationError, CapabilityError, DimensionError,
            InvalidRunError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (BlowUpError, DegenerateMassError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 1
    print(report.to_json())
    if cfg.out is not None:
        os.makedirs(cfg.out, exist_ok=True)
        report.write(os.path.join(cfg.out, f"report_{args.command}.json"))
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
