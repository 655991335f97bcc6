import sys


def _check_python_version():
    if sys.version_info[:2] < (3, 10):
        sys.exit(f"run_lab.py requires Python 3.10 or newer. Current interpreter: {sys.version.split()[0]}")


_check_python_version()

import argparse  # noqa: E402
from dataclasses import replace  # noqa: E402

from pgca.core.errors import ConfigError, PhaseError  # noqa: E402
from pgca.lab.config import PRESETS, parse_config  # noqa: E402
from pgca.lab.logger import Logger  # noqa: E402
from pgca.lab.manager import ExperimentManager, run_experiment  # noqa: E402
from pgca.lab.manifest import verify  # noqa: E402

SUBCOMMANDS = ("gen-data", "train", "eval", "ablate", "sweep", "select", "analyze", "verify")
_PRESET_FOR = {"ablate": "ablation", "sweep": "sweep", "select": "selection"}


def _parse_args(argv=None):
    parser = argparse.ArgumentParser(description="Translation-guided recognition lab: data, training, ablations, reports.")
    parser.add_argument("command", choices=SUBCOMMANDS)
    parser.add_argument("--config", metavar="PATH", required=True, help="Experiment file (INI sections, key = value).")
    parser.add_argument("--out", metavar="DIR", default=None, help="Run directory; overrides experiment.out_dir and PGCA_OUT_DIR.")
    parser.add_argument("--seed", type=int, default=None, help="Overrides experiment.seed and PGCA_SEED.")
    parser.add_argument("--preset", choices=PRESETS, default=None, help="Overrides experiment.preset.")
    return parser.parse_args(argv)


def load_config(args):
    config = parse_config(args.config)
    overrides = {}
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.preset is not None:
        overrides["preset"] = args.preset
    elif args.command in _PRESET_FOR:
        overrides["preset"] = _PRESET_FOR[args.command]
    config = replace(config, **overrides)
    config.validate(strict=True)
    return config


def _dispatch(command, config, preset_requested=False):
    if command == "verify":
        problems = verify(config.out_dir)
        for problem in problems:
            print(f"[run_lab] {problem}", file=sys.stderr)
        print(f"[run_lab] verify {config.out_dir!r}: {'ok' if not problems else f'{len(problems)} problem(s)'}")
        return 0 if not problems else 1

    if command in _PRESET_FOR or preset_requested:
        run_dir = run_experiment(config)
        print(f"[run_lab] preset {config.preset!r} finished in {run_dir!r}")
        return 0

    manager = ExperimentManager(config)
    manager.write_resolved()
    if command == "gen-data":
        splits = manager.corpus()
        print(f"[run_lab] corpus ready: {len(splits.train)} train / {len(splits.test)} test utterances")
    elif command == "train":
        ckpt = manager.train()
        print(f"[run_lab] trained stage-{ckpt.stage} model ({ckpt.config.fusion_mode}) in {config.out_dir!r}")
    elif command == "eval":
        for name, cer in manager.evaluate_existing().items():
            print(f"[run_lab] {name}: CER {cer:.4f}")
    elif command == "analyze":
        ckpt = manager.analyze()
        print(f"[run_lab] analysis of {ckpt.config.fusion_mode} over {list(ckpt.config.aux_languages)} written to {manager.path('reports')!r}")
    manager.finish()
    return 0


def main(argv=None):
    args = _parse_args(argv)
    try:
        config = load_config(args)
    except ConfigError as e:
        print(f"[run_lab] phase=config error: {e}", file=sys.stderr)
        return 2
    Logger.setup(config.log_level)
    try:
        return _dispatch(args.command, config, preset_requested=args.preset is not None)
    except PhaseError as e:
        print(f"[run_lab] phase={e.phase} error: {e.cause}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
