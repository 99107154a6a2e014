"""``bikd`` command line: data, train, eval, export, verify.

Exit codes: 0 success, 1 verification failure, 2 usage / input error.
Every failure prints exactly one ``error[CODE]: message`` line on stderr.
"""
from __future__ import annotations

import json
import logging
import sys

import click

from .config import ConfigError, DataConfig, ExperimentConfig, load_config
from .data import DataError
from .experiment import RunError, comparison_table, eval_run, export_run, resolve_out, train_run, write_data_dir
from .io import FormatError
from .metrics import write_rows

EXIT_OK, EXIT_VERIFY, EXIT_USAGE = 0, 1, 2


class VerificationFailed(Exception):
    pass


def _positive_int(ctx, param, value):
    if value is not None and value < 1:
        raise click.BadParameter(f"must be >= 1, got {value}")
    return value


def _rho_check(ctx, param, value):
    if value is not None and not value >= 1:
        raise click.BadParameter(f"imbalance factor must be >= 1, got {value}")
    return value


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose: bool) -> None:
    """Bilevel distillation experiments."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@click.option("--synthetic", "source", flag_value="synthetic", default=True, help="Gaussian-mixture data (default).")
@click.option("--cifar-dir", type=click.Path(file_okay=False), help="Directory with CIFAR-10 binary batches.")
@click.option("--classes", type=int, default=10, show_default=True, callback=_positive_int)
@click.option("--rho", type=float, default=50.0, show_default=True, callback=_rho_check, help="Imbalance factor n_max/n_min.")
@click.option("--n-max", type=int, default=1000, show_default=True, callback=_positive_int)
@click.option("--dim", type=int, default=32, show_default=True)
@click.option("--separation", type=float, default=3.0, show_default=True)
@click.option("--val-total", type=int, default=1000, show_default=True)
@click.option("--test-per-class", type=int, default=200, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(), help="Output dataset directory.")
def data(source, cifar_dir, classes, rho, n_max, dim, separation, val_total, test_per_class, seed, out):
    """Build train / validation / test splits and a manifest."""
    cfg = DataConfig(
        source="cifar10" if cifar_dir else source,
        classes=classes,
        n_max=n_max,
        rho=rho,
        dim=dim,
        separation=separation,
        val_total=val_total,
        test_per_class=test_per_class,
        cifar_dir=cifar_dir,
        seed=seed,
    )
    manifest = write_data_dir(cfg, out)
    click.echo(json.dumps({"out": str(resolve_out(out)), "class_counts": manifest["class_counts"]}))


@cli.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON experiment config.")
@click.option("--data", "data_dir", required=True, type=click.Path(file_okay=False))
@click.option("--out", required=True, type=click.Path())
@click.option("--method", type=click.Choice(["ce", "kd", "bikd"]))
@click.option("--teacher", "teacher_dir", type=click.Path(file_okay=False), help="Run directory of a trained teacher.")
@click.option("--role", type=click.Choice(["student", "teacher"]), default="student", show_default=True)
@click.option("--k", type=int, help="Inner steps per meta update.")
@click.option("--epochs", type=int)
@click.option("--seed", type=int)
@click.option("--eta-theta", type=float)
@click.option("--eta-phi", type=float)
@click.option("--tau", type=float)
@click.option("--alpha", type=float)
@click.option("--batch-size", type=int)
@click.option("--milestones", help="Comma-separated epochs for the x0.1 decay.")
@click.option("--dtype", type=click.Choice(["float32", "float64"]))
def train(config_path, data_dir, out, method, teacher_dir, role, milestones, **overrides):
    """Train one model; flags override config-file values."""
    exp = load_config(config_path) if config_path else ExperimentConfig()
    train_over = {k: v for k, v in overrides.items() if v is not None}
    if milestones is not None:
        train_over["milestones"] = [int(m) for m in milestones.split(",") if m.strip()]
    merged = exp.to_dict()
    merged["train"].update(train_over)
    if method is not None:
        merged["method"] = method
    elif role == "teacher":
        merged["method"] = "ce"
    exp = ExperimentConfig.from_dict(merged)
    run = train_run(exp, data_dir, out, teacher_dir=teacher_dir, role=role)
    click.echo(json.dumps({"out": str(run), "method": exp.method}))


@cli.command(name="eval")
@click.argument("runs", nargs=-1, required=True, type=click.Path(file_okay=False))
@click.option("--table", type=click.Path(dir_okay=False), help="Write a per-method comparison CSV here.")
def eval_cmd(runs, table):
    """Evaluate run directories on their test split."""
    rows = [eval_run(r) for r in runs]
    summary = comparison_table(rows)
    if table:
        write_rows(resolve_out(table), summary)
    for row in rows:
        click.echo(json.dumps({k: row[k] for k in ("run", "method", "seed", "accuracy", "tail3_accuracy")}))
    click.echo(json.dumps({"table": summary}))


@cli.command()
@click.argument("run", type=click.Path(file_okay=False))
def export(run):
    """Write weight_scatter.csv for a bilevel run."""
    path = export_run(run)
    click.echo(json.dumps({"out": str(path)}))


@cli.command()
@click.argument("suite", type=click.Choice(["gradcheck", "hypergrad", "equivalence", "data"]))
@click.option("--k", "ks", type=int, multiple=True, help="Window length(s) for the hypergrad suite.")
@click.option("--rho", type=float, default=100.0, show_default=True, callback=_rho_check)
@click.option("--seeds", type=int, default=None, help="Number of random seeds (gradcheck) or seeds 0..n-1 (hypergrad).")
def verify(suite, ks, rho, seeds):
    """Run a double-precision property suite and print a JSON report."""
    from . import verify as suites

    if suite == "gradcheck":
        report = suites.suite_gradcheck(seeds or 20)
    elif suite == "hypergrad":
        kw = {}
        if ks:
            if min(ks) < 1:
                raise click.BadParameter("must be >= 1", param_hint="'--k'")
            kw["ks"] = ks
        if seeds:
            kw["seeds"] = tuple(range(seeds))
        report = suites.suite_hypergrad(**kw)
    elif suite == "equivalence":
        report = suites.suite_equivalence()
    else:
        report = suites.suite_data(rho=rho)
    click.echo(json.dumps(report, indent=2))
    if not report["passed"]:
        raise VerificationFailed(f"suite {suite} failed")


def _fail(code: str, message: str, status: int) -> int:
    click.echo(f"error[{code}]: {' '.join(str(message).split())}", err=True)
    return status


def main(argv: list[str] | None = None) -> int:
    try:
        cli.main(args=argv, prog_name="bikd", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.Abort:
        return _fail("ABORTED", "aborted", EXIT_USAGE)
    except click.UsageError as exc:
        return _fail("USAGE", exc.format_message(), EXIT_USAGE)
    except VerificationFailed as exc:
        return _fail("VERIFY_FAILED", exc, EXIT_VERIFY)
    except RunError as exc:
        return _fail(exc.code, exc, EXIT_USAGE)
    except ConfigError as exc:
        return _fail("CONFIG", exc, EXIT_USAGE)
    except (DataError, FormatError) as exc:
        return _fail("DATA", exc, EXIT_USAGE)
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        return _fail("INPUT", exc, EXIT_USAGE)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
