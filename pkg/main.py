import argparse
import os
import sys

# Ensure src is in the python path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src.config import config, parse_override  # noqa: E402
from src.errors import ConfigError, CSFLError  # noqa: E402
from src.orchestrator import (  # noqa: E402
    cmd_gen_data,
    cmd_run,
    cmd_sweep,
    cmd_validate,
    select_protocol,
)

GENERATED_CSV = "synthetic.csv"


def build_parser():
    parser = argparse.ArgumentParser(
        description="csfl-sim - split federated learning simulator with collaborative relays"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    def common(sub, config_required=True):
        sub.add_argument("--config", required=config_required, help="Experiment YAML file")
        sub.add_argument("--seed", type=int, help="Override the config seed")
        sub.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="Override any config field by dotted path (repeatable)",
        )

    run = commands.add_parser("run", help="Run the configured protocols")
    common(run)
    run.add_argument("--out", help="Output directory")
    run.add_argument("--protocol", choices=["psl", "sfl", "csfl-g"], help="Run one protocol only")

    sweep = commands.add_parser("sweep", help="Run one experiment per value of a config field")
    common(sweep)
    sweep.add_argument("--out", help="Output directory")
    sweep.add_argument("--protocol", choices=["psl", "sfl", "csfl-g"], help="Run one protocol only")
    sweep.add_argument("--axis", required=True, help="Dotted path of a scalar config field")
    sweep.add_argument("--values", required=True, help="Comma-separated values for the axis")
    sweep.add_argument("--jobs", type=int, help="Worker processes (1 runs cells inline)")

    gen = commands.add_parser("gen-data", help="Write a synthetic dataset as CSV")
    common(gen, config_required=False)
    target = gen.add_mutually_exclusive_group(required=True)
    target.add_argument("--path", help="CSV file to write")
    target.add_argument("--out", help=f"Output directory (writes {GENERATED_CSV})")
    gen.add_argument("--rows", type=int, help="Number of rows")

    validate = commands.add_parser("validate", help="Check a config and report defaulted fields")
    common(validate)
    return parser


def collect_overrides(args):
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = parse_override(value)
    if args.seed is not None:
        overrides["seed"] = args.seed
    return overrides


def dispatch(args):
    overrides = collect_overrides(args)
    if args.command == "run":
        experiment = select_protocol(config.load(args.config, overrides), args.protocol)
        if args.out:
            experiment = experiment.with_output_dir(args.out)
        cmd_run(experiment)
    elif args.command == "sweep":
        values = [parse_override(v.strip()) for v in args.values.split(",") if v.strip()]
        cmd_sweep(
            args.config,
            args.axis,
            values,
            overrides=overrides,
            out_dir=args.out,
            protocol=args.protocol,
            jobs=args.jobs,
        )
    elif args.command == "gen-data":
        experiment = config.load(args.config, overrides) if args.config else None
        seed = experiment.seed if experiment is not None else (args.seed or 0)
        path = args.path or os.path.join(args.out, GENERATED_CSV)
        cmd_gen_data(path, seed=seed, rows=args.rows, experiment=experiment)
    elif args.command == "validate":
        cmd_validate(args.config, overrides)


def main(argv=None):
    args = build_parser().parse_args(argv)
    title = args.command.capitalize()
    try:
        dispatch(args)
    except CSFLError as e:
        print(f"❌ {title} failed: {e}")
        sys.exit(e.exit_code)
    except OSError as e:
        print(f"❌ {title} failed: {e}")
        sys.exit(4)
    except Exception as e:
        print(f"❌ {title} failed: {e}")
        sys.exit(3)
    return 0


if __name__ == "__main__":
    main()
