"""Command-line entry point: ``diffptq <command> --config run.yaml``.

Exit codes: 0 success, 2 config or argument error, 3 artifacts inconsistent
with the config, 4 missing input file, 1 anything else.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__, experiment
from .config import ExperimentConfig, dump_config, load_config
from .errors import ConfigError, ConsistencyError, DiffPTQError, InvalidArgumentError, NotFoundError

log = logging.getLogger("diffptq")

EXIT_CODES = ((ConfigError, 2), (InvalidArgumentError, 2), (ConsistencyError, 3), (NotFoundError, 4))


def _interval(text: str):
    try:
        a, b = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'a,b', got {text!r}") from None
    return a, b


def _floats(text: str):
    try:
        return [float(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffptq", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"diffptq {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    init = sub.add_parser("init-config", help="write the default config")
    init.add_argument("path", type=Path)

    def common(name, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", type=Path, required=True)
        sp.add_argument("--out", type=Path, help="run directory (default: config 'out')")
        sp.add_argument("--seed", type=int, help="override the seed of this stage")
        return sp

    common("train", "train the full-precision denoiser")
    cal = common("calibrate", "quantize weights and calibrate activation quantizers")
    cal.add_argument("--method", choices=("progressive", "fp_trajectory"))
    cal.add_argument("--tau", type=float)
    ev = common("evaluate", "compare quantized and full-precision samples")
    ev.add_argument("--tau", type=float)
    pr = common("probe", "timestep-interval sensitivity probe")
    pr.add_argument("--interval", type=_interval, help="a,b (1 <= a <= b <= T)")
    pr.add_argument("--noise-std", type=float)
    pr.add_argument("--tau", type=float)
    sw = common("sweep", "relaxation-proportion sweep")
    sw.add_argument("--taus", type=_floats, help="comma-separated, ascending")
    tc = common("theorem-check", "check the accumulated-error bound")
    tc.add_argument("--tau", type=float)
    return p


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    tau = getattr(args, "tau", None)
    if tau is not None:
        cfg = cfg.replace(relax={"tau": tau})
    if args.seed is not None:
        section, field = {"train": ("training", "seed"), "calibrate": ("quant", "seed")}.get(
            args.command, ("eval", "seeds"))
        value = [args.seed] if field == "seeds" else args.seed
        cfg = cfg.replace(**{section: {field: value}})
    return cfg


def run(args) -> None:
    if args.command == "init-config":
        args.path.write_text(dump_config(ExperimentConfig()), encoding="utf-8")
        return
    cfg = _apply_overrides(load_config(args.config), args)
    out = args.out
    if args.command == "train":
        experiment.run_train(cfg, out)
    elif args.command == "calibrate":
        experiment.run_calibrate(cfg, out, args.method)
    elif args.command == "evaluate":
        report = experiment.run_evaluate(cfg, out)
        for split in report.splits:
            print(f"{split}: frechet_to_fp={report.frechet_to_fp(split):.6g} "
                  f"condition_score={report.condition_score(split):.4f}")
        print(f"avg_act_bits={report.avg_act_bits:.4g} bops={report.bops:.6g}")
    elif args.command == "probe":
        for row in experiment.run_probe(cfg, out, args.interval, args.noise_std):
            print(",".join(str(v) for v in row))
    elif args.command == "sweep":
        for r in experiment.run_sweep(cfg, out, args.taus):
            print(f"tau={r.tau:g} avg_bits={r.avg_bits:.4g} frechet_to_fp={r.frechet_to_fp:.6g} "
                  f"condition_score={r.condition_score:.4f}")
    elif args.command == "theorem-check":
        rep = experiment.run_theorem_check(cfg, out)
        print(f"delta_actual={rep.delta_actual:.6g} bound={rep.linear_prediction:.6g} "
              f"residual={rep.residual:.6g}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except DiffPTQError as exc:
        for cls, code in EXIT_CODES:
            if isinstance(exc, cls):
                print(f"diffptq: error: {exc}", file=sys.stderr)
                return code
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
