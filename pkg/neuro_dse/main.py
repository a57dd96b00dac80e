"""
Command-line entry point
Runs simulations, training, the estimation pipelines, sweeps and reports
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from neuro_dse import __version__
from neuro_dse.config import DEFAULT_OUT_DIR, DEFAULT_WORKERS, TORCH_THREADS
from neuro_dse.errors import ConfigurationError, NumericalError
from neuro_dse.models import PipelineConfig
from utils.helpers import setup_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to the configuration exit code"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or comma-separated numbers, got '{text}'") from None


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="Pipeline config JSON (defaults built in)")
    p.add_argument("--seed", type=int, help="Test-scenario seed")
    p.add_argument("--out-dir", type=Path, help=f"Output directory (default under {DEFAULT_OUT_DIR}/)")
    p.add_argument("--backend", choices=["ekf", "ukf"], help="Filter backend")
    p.add_argument("--mask", type=_float_list, help="Fraction of measurable InSys branches, e.g. 0.7 (sweeps: 0.7,0.8,1.0)")
    p.add_argument("--noise-var", type=_float_list, help="Measurement noise variance (sweeps: 1e-6,1e-4)")
    p.add_argument("--workers", type=int, default=None, help="Worker processes")
    p.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING, ...")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="neuro-dse", description="Dynamic state estimation for networked microgrids")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    for name, help_text in [
        ("simulate", "Generate training and test trajectories"),
        ("train-odenet", "Train the plain ODE-Net on measured boundary data"),
        ("dse", "Neuro-DSE: plain ODE-Net + EKF/UKF"),
        ("dse-plus", "Self-refined Neuro-DSE"),
        ("kalmannet-dse", "Neuro-DSE with a learned recurrent gain"),
        ("inertia", "Joint state and VSG inertia estimation"),
    ]:
        _add_common(sub.add_parser(name, help=help_text))

    sweep = sub.add_parser("sweep", help="Run a pipeline over a grid and several seeds")
    _add_common(sweep)
    sweep.add_argument("--grid", required=True, choices=["noise", "mask", "control-mode", "power-mix", "backend"])
    sweep.add_argument("--values", nargs="+", help="Grid values (defaults per grid)")
    sweep.add_argument("--seeds", type=int, default=1, help="Number of seeds, starting at --seed")
    sweep.add_argument("--pipeline", default="dse", choices=["dse", "dse-plus", "kalmannet-dse"])

    rep = sub.add_parser("report", help="Tabulate metrics.json files")
    rep.add_argument("paths", nargs="+", type=Path, help="Run directories or metrics.json files")
    rep.add_argument("--out-dir", type=Path, help="Where table.csv and the boxplot CSVs go")
    rep.add_argument("--log-level", default=None)
    return parser


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    """Config file (or defaults) with command-line overrides applied"""
    cfg = PipelineConfig.from_json(args.config) if args.config else PipelineConfig()
    data = cfg.model_dump(mode="json")
    if args.seed is not None:
        data["seed"] = args.seed
    if args.backend is not None:
        data["filter"]["backend"] = args.backend
    for flag, values, section, key in (("--mask", args.mask, "mask", "branch_fraction"),
                                       ("--noise-var", args.noise_var, "noise", "measurement_var")):
        if values is None or _grid_flag(args) == flag:
            continue
        if len(values) != 1:
            raise ConfigurationError(f"{flag} takes a single value outside its sweep grid")
        data[section][key] = values[0]
    if args.workers is not None:
        data["workers"] = args.workers
    elif not args.config:
        data["workers"] = DEFAULT_WORKERS
    return PipelineConfig.parse(data)


def _grid_flag(args: argparse.Namespace) -> Optional[str]:
    if getattr(args, "command", None) != "sweep":
        return None
    return {"noise": "--noise-var", "mask": "--mask"}.get(args.grid)


def _sweep_values(args: argparse.Namespace):
    if args.values is not None:
        return [float(v) if args.grid in ("noise", "mask") else v for v in args.values]
    if args.grid == "noise" and args.noise_var:
        return args.noise_var
    if args.grid == "mask" and args.mask:
        return args.mask
    return None


def run(args: argparse.Namespace) -> Path:
    from neuro_dse import odenet, pipelines
    from neuro_dse.scenario_io import generate_dataset, report

    if args.command == "report":
        out = args.out_dir or Path(DEFAULT_OUT_DIR) / "report"
        report(args.paths, out)
        return out

    cfg = resolve_config(args)
    out = args.out_dir or Path(DEFAULT_OUT_DIR) / f"{args.command}-seed{cfg.seed:03d}"

    if args.command == "simulate":
        generate_dataset(cfg, out, workers=cfg.workers)
    elif args.command == "train-odenet":
        prep = pipelines.prepare(cfg)
        net, history = pipelines.train_plain_odenet(prep)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.to_json(), encoding="utf-8")
        odenet.save_checkpoint(net, out / "odenet.json", prep.cfg_hash)
        odenet.write_loss_history(history, out / "odenet_loss.csv")
    elif args.command == "inertia":
        pipelines.run_inertia_estimation(cfg, out_dir=out)
    elif args.command == "sweep":
        values = _sweep_values(args)
        seeds = list(range(cfg.seed, cfg.seed + args.seeds))
        pipelines.run_sweep(cfg, args.grid, out, values=values, seeds=seeds, pipeline=args.pipeline,
                            workers=cfg.workers)
    else:
        pipelines.PIPELINES[args.command](cfg, out_dir=out)
    return out


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)

    import torch
    torch.set_num_threads(TORCH_THREADS)

    try:
        out = run(args)
    except ConfigurationError as e:
        logger.error("Configuration error: %s", e)
        return EXIT_CONFIG
    except NumericalError as e:
        logger.error("Numerical failure: %s", e)
        return EXIT_NUMERICAL
    print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
