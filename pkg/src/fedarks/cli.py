"""Command-line entry point: ``fedarks {run,ablate,sweep,export-data}``.

Exit codes: 0 success, 2 configuration error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .client import NumericalError
from .harness import (
    CONFIG_KEYS,
    build_config,
    read_config_file,
    run_ablation,
    run_ablation_seeds,
    run_experiment,
    run_sweep,
)
from .params import LayoutError
from .synthdata import ConfigError, export_federation, generate_federation

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

log = logging.getLogger("fedarks")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--rounds", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--aggregator", choices=["ks", "fedavg"])
    common.add_argument("--rk", choices=["on", "off"])
    common.add_argument("--held-out", dest="held_out", help="domain id or 'sweep'")
    common.add_argument("--out-dir", dest="out_dir")
    common.add_argument("--workers", type=int)
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="fedarks", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="one leave-one-domain-out experiment")
    ablate = sub.add_parser("ablate", parents=[common], help="2x2 RK/KS ablation grid")
    ablate.add_argument("--seeds", type=int, nargs="+", help="average the grid over these seeds")
    sub.add_parser("sweep", parents=[common], help="hold out every domain in turn and report SAvg")
    sub.add_parser("export-data", parents=[common], help="write the generated federation to out-dir")
    return parser


def _gather(args) -> dict[str, str]:
    values: dict[str, str] = {}
    if args.config:
        values.update(read_config_file(args.config))
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        values[key.strip()] = value
    for key in ("rounds", "seed", "aggregator", "rk", "held_out", "out_dir", "workers"):
        value = getattr(args, key)
        if value is not None:
            values[key] = str(value)
    return values


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        values = _gather(args)
        if args.command == "sweep":
            values.setdefault("held_out", "sweep")
        cfg = build_config(values)
        if args.command in ("export-data",) and cfg.out_dir is None:
            raise ConfigError("export-data needs --out-dir")

        if args.command == "run":
            if cfg.held_out_domain == "sweep":
                raise ConfigError("use the 'sweep' subcommand for held_out = sweep")
            rep = run_experiment(cfg)
            out = {"task": rep.task, "mAP": rep.final.mAP, "rank1": rep.final.rank1,
                   "weight_stabilization_last5": rep.weight_stabilization()}
        elif args.command == "sweep":
            sw = run_sweep(cfg)
            out = {"tasks": {r.task: [r.final.mAP, r.final.rank1] for r in sw.tasks},
                   "SAvg": {"mAP": sw.savg[0], "rank1": sw.savg[1]}}
        elif args.command == "ablate":
            if args.seeds:
                res = run_ablation_seeds(cfg, args.seeds)
                out = {"mean_rank1": res["mean_rank1"], "mean_mAP": res["mean_mAP"],
                       "ordering": res["ordering"], "ordering_ok": res["ordering_ok"]}
                if not res["ordering_ok"]:
                    log.warning("ablation ordering check failed: %s", res["ordering"])
            else:
                ab = run_ablation(cfg)
                out = {name: {"mAP": s[0], "rank1": s[1]} for name, s in ab.savg.items()}
        else:
            path = export_federation(generate_federation(cfg.federation), cfg.out_dir)
            out = {"manifest": str(path)}
    except (ConfigError, LayoutError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical abort at round {exc.round} (client {exc.client_id}): {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK


__all__ = ["main", "CONFIG_KEYS"]
