import concurrent.futures
import multiprocessing
import os

from src.config import config, scalar_axis
from src.data import SyntheticSpec, generate_synthetic, write_csv
from src.errors import ConfigError, CSFLError, OutputError
from src.reporting import write_metrics_csv, write_summary_csv, write_trace_json
from src.sim_engine import run_experiment


def print_row(row):
    print(
        f"  {row.protocol:<7} epoch {row.epoch:>3}  train_mae={row.train_mae:.4f}  "
        f"eval_mae={row.eval_mae:.4f}  throughput={row.throughput:.1f}/s  "
        f"sync_delay={row.sync_delay:.4f}s"
    )


def select_protocol(experiment, name):
    if not name:
        return experiment
    if name not in experiment.protocols:
        raise ConfigError(
            f"--protocol {name} is not among the configured protocols {list(experiment.protocols)}"
        )
    return experiment.with_protocols([name])


def cmd_run(experiment):
    """Run every configured protocol and write metrics.csv and trace.json"""
    protocols = ", ".join(experiment.protocols)
    print(f"======= Running {protocols} for {experiment.training.epochs} epochs =======")
    report = run_experiment(experiment, progress=print_row)

    output = experiment.output
    write_metrics_csv(output.metrics_path, report.rows)
    write_trace_json(output.trace_path, report.records)
    print(f"✅ Wrote {output.metrics_path} ({len(report.rows)} rows) and {output.trace_path}")
    return output.metrics_path, output.trace_path


def sweep_worker(path, overrides, protocol=None):
    """Worker entry point for multiprocessing"""
    try:
        # Reload config with this cell's overrides
        experiment = select_protocol(config.load(path, overrides), protocol)
        return run_experiment(experiment).rows
    except CSFLError:
        raise
    except Exception as e:
        raise RuntimeError(f"Sweep cell failed: {str(e)}") from None


def cell_name(axis, value):
    label = str(value).replace(os.sep, "_").replace(" ", "")
    return f"metrics_{axis.replace('.', '_')}={label}.csv"


def cmd_sweep(path, axis, values, overrides=None, out_dir=None, protocol=None, jobs=None):
    """One experiment per axis value; cells share nothing and may run in parallel"""
    if not values:
        raise ConfigError("Sweep needs at least one value")
    overrides = dict(overrides or {})
    experiment = select_protocol(config.load(path, overrides), protocol)
    scalar_axis(config.tree, axis)
    out_dir = out_dir or experiment.output.dir

    cells = [dict(overrides, **{axis: value}) for value in values]
    # fail fast on a bad value before any worker starts
    for cell in cells:
        config.load(path, cell)

    print(f"======= Sweeping {axis} over {len(cells)} values =======")
    results = [None] * len(cells)
    if len(cells) == 1 or jobs == 1:
        for index, cell in enumerate(cells):
            results[index] = sweep_worker(path, cell, protocol)
            print(f"✅ Cell {axis}={values[index]} done")
    else:
        ctx = multiprocessing.get_context("spawn")
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as executor:
            futures = {
                executor.submit(sweep_worker, path, cell, protocol): index
                for index, cell in enumerate(cells)
            }
            for future in concurrent.futures.as_completed(futures):
                index = futures[future]
                try:
                    results[index] = future.result()
                    print(f"✅ Cell {axis}={values[index]} done")
                except Exception as e:
                    print(f"❌ Cell {axis}={values[index]} failed: {e}")
                    raise e

    written = []
    for value, rows in zip(values, results):
        target = os.path.join(out_dir, cell_name(axis, value))
        write_metrics_csv(target, rows)
        written.append(target)
    summary = os.path.join(out_dir, "summary.csv")
    write_summary_csv(summary, axis, list(zip(values, results)))
    print(f"✅ Wrote {len(written)} metric files and {summary}")
    return written, summary


def cmd_gen_data(target, seed=0, rows=None, experiment=None):
    """Write a synthetic dataset as a CSV that load_csv reads back"""
    if experiment is not None:
        arch, data = experiment.arch, experiment.data
        spec = SyntheticSpec(
            num_numeric=arch.num_numeric_features,
            vocab1=arch.vocab1,
            vocab2=arch.vocab2,
            noise_sigma=data.noise_sigma,
            weight_scale=data.weight_scale,
        )
        rows = rows or data.num_users * data.per_user + data.eval_size
    else:
        spec = SyntheticSpec()
        rows = rows or 1200
    print(f"======= Generating {rows} synthetic rows (seed {seed}) =======")
    dataset = generate_synthetic(seed, rows, spec)
    try:
        write_csv(dataset, target)
    except OSError as e:
        raise OutputError(f"Cannot write {target}: {e}") from None
    print(f"✅ Wrote {target}")
    return target


def cmd_validate(path, overrides=None):
    experiment = config.load(path, overrides)
    print(f"✅ {path} is valid")
    if experiment.defaulted:
        print(f"⚠️  {len(experiment.defaulted)} field(s) took their default value")
    print(config.summary(), end="")
    return experiment
