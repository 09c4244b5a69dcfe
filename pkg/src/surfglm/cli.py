import json
import logging
import sys
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path

import typer

from .config import (
    DATA_DIR,
    DEFAULT_AR_ORDER,
    DEFAULT_FWHM_MM,
    DEFAULT_MAX_ITER,
    DEFAULT_SAMPLES,
    DEFAULT_TOL,
    DEFAULT_TR,
)

# setup a sane default logger
logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
logger = logging.getLogger(__name__)

app = typer.Typer(
    name="surfglm",
    help="surfglm: spatial Bayesian GLM on surface meshes, fitted by EM.",
)


@app.callback()
def main(
    verbose: bool = typer.Option(False, "-v", "--verbose", help="Enable debug logging"),
) -> None:
    """surfglm: spatial Bayesian GLM on surface meshes, fitted by EM."""
    if verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    # keep lock chatter out of debug output
    logging.getLogger("filelock").setLevel(logging.WARNING)
    logging.getLogger("matplotlib").setLevel(logging.WARNING)


@contextmanager
def _errors() -> Iterator[None]:
    """Domain and I/O failures become `Error: ...` and exit code 1."""
    try:
        yield
    except (ValueError, ArithmeticError, OSError, KeyError) as exc:
        message = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        typer.echo(f"Error: {message}", err=True)
        raise typer.Exit(1) from exc


def _floats(raw: str, what: str) -> list[float]:
    try:
        return [float(x) for x in raw.split(",") if x.strip()]
    except ValueError:
        typer.echo(f"Error: {what} must be comma-separated numbers, got '{raw}'", err=True)
        raise typer.Exit(1) from None


def _out(out: str | None, command: str) -> Path:
    return Path(out) if out else DATA_DIR / command


def _em_config(
    config: str | None,
    tol: float | None,
    max_iter: int | None,
    no_accelerate: bool,
    trace_method: str | None,
    strict: bool,
    seed: int,
):
    from .em_engine import EmConfig

    data = json.loads(Path(config).read_text(encoding="utf-8")) if config else {}
    if tol is not None:
        data["tol"] = tol
    if max_iter is not None:
        data["max_iter"] = max_iter
    if no_accelerate:
        data["accelerate"] = False
    if trace_method is not None:
        data["trace_method"] = trace_method
    if strict:
        data["strict"] = True
    data["seed"] = seed
    return EmConfig.from_dict(data)


@app.command("simulate")
def simulate_cmd(
    config: str | None = typer.Option(None, "--config", help="Simulation settings (JSON)"),
    out: str | None = typer.Option(None, "--out", help="Output directory"),
    seed: int | None = typer.Option(None, "--seed", help="Override the configured seed"),
) -> None:
    """Simulate surface fMRI runs with known coefficient fields."""
    from dataclasses import replace

    from .controller import simulate_to_dir
    from .simulator import SimConfig

    with _errors():
        cfg = SimConfig.from_json(Path(config)) if config else SimConfig()
        if seed is not None:
            cfg = replace(cfg, seed=seed)
        path = simulate_to_dir(cfg, _out(out, "simulate"), Path(config) if config else None)
    typer.echo(str(path))


@app.command("preprocess")
def preprocess_cmd(
    run_dir: str = typer.Argument(..., help="Run directory with Y.csv and stimulus.csv"),
    mesh: str = typer.Option(..., "--mesh", help="Mesh file"),
    out: str | None = typer.Option(None, "--out", help="Output directory"),
    order: int = typer.Option(DEFAULT_AR_ORDER, "--order", help="AR order"),
    fwhm: float = typer.Option(DEFAULT_FWHM_MM, "--fwhm", help="AR smoothing FWHM (mm)"),
    tr: float = typer.Option(DEFAULT_TR, "--tr", help="Repetition time (s)"),
    no_scale: bool = typer.Option(
        False, "--no-scale", help="Response is already in percent signal change"
    ),
    seed: int = typer.Option(0, "--seed", help="Unused; accepted for a uniform interface"),
) -> None:
    """HRF convolution, scaling, nuisance regression and AR prewhitening of one run."""
    from .controller import preprocess_to_dir
    from .preprocess import HrfParams

    with _errors():
        path = preprocess_to_dir(
            Path(run_dir),
            Path(mesh),
            _out(out, "preprocess"),
            hrf=HrfParams(TR=tr),
            order=order,
            fwhm=fwhm,
            scale=not no_scale,
        )
    typer.echo(str(path))


@app.command("fit-classical")
def fit_classical_cmd(
    run_dir: str = typer.Argument(..., help="Whitened run directory"),
    out: str | None = typer.Option(None, "--out", help="Output directory"),
    gamma: float = typer.Option(0.0, "--gamma", help="Activation threshold"),
    alpha: float = typer.Option(0.05, "--alpha", help="Test level"),
    correction: str = typer.Option("bonferroni", "--correction", help="none|bonferroni"),
    seed: int = typer.Option(0, "--seed", help="Unused; accepted for a uniform interface"),
) -> None:
    """Per-location least squares and one-sided t-tests."""
    from .controller import fit_classical_to_dir

    with _errors():
        path = fit_classical_to_dir(
            Path(run_dir), _out(out, "fit-classical"), gamma=gamma, alpha=alpha, correction=correction
        )
    typer.echo(str(path))


@app.command("fit-em")
def fit_em_cmd(
    run_dirs: list[str] = typer.Argument(None, help="Whitened run directories sharing Theta"),
    mesh: str | None = typer.Option(None, "--mesh", help="Mesh file"),
    jobs: str | None = typer.Option(
        None, "--jobs", help="JSON of independent meshes (e.g. hemispheres) to fit in parallel"
    ),
    out: str | None = typer.Option(None, "--out", help="Output directory"),
    config: str | None = typer.Option(None, "--config", help="EM settings (JSON)"),
    tol: float | None = typer.Option(None, "--tol", help=f"Stopping tolerance [{DEFAULT_TOL}]"),
    max_iter: int | None = typer.Option(
        None, "--max-iter", help=f"Iteration cap [{DEFAULT_MAX_ITER}]"
    ),
    no_accelerate: bool = typer.Option(False, "--no-accelerate", help="Plain EM iterations"),
    trace_method: str | None = typer.Option(
        None, "--trace-method", help="selected|hutchinson"
    ),
    strict: bool = typer.Option(False, "--strict", help="Fail instead of flooring sigma^2"),
    locations: str | None = typer.Option(
        None, "--locations", help="CSV of data location coordinates when they are not the vertices"
    ),
    json_output: bool = typer.Option(False, "--json", help="Print the estimates as JSON"),
    seed: int = typer.Option(0, "--seed", help="Seed for stochastic trace estimates"),
) -> None:
    """Posterior mode of the hyperparameters and the posterior of the fields."""
    from .controller import fit_em_jobs_to_dir, fit_em_to_dir

    if bool(jobs) == bool(run_dirs):
        typer.echo("Error: give either run directories with --mesh, or --jobs", err=True)
        raise typer.Exit(1)
    if run_dirs and not mesh:
        typer.echo("Error: --mesh is required with run directories", err=True)
        raise typer.Exit(1)

    with _errors():
        cfg = _em_config(config, tol, max_iter, no_accelerate, trace_method, strict, seed)
        target = _out(out, "fit-em")
        if jobs:
            results = fit_em_jobs_to_dir(Path(jobs), target, cfg)
        else:
            results = {
                "": fit_em_to_dir(
                    [Path(r) for r in run_dirs],
                    Path(mesh),  # type: ignore[arg-type]
                    target,
                    cfg,
                    Path(locations) if locations else None,
                )
            }
    summary = {
        name: {**r.theta.to_dict(), "converged": r.converged, "iterations": r.trace.iterations}
        for name, r in results.items()
    }
    if json_output:
        typer.echo(json.dumps(summary if jobs else summary[""], indent=2))
        return
    for name, r in results.items():
        label = f"{name}: " if name else ""
        typer.echo(
            f"{label}sigma2={r.theta.sigma2:.6g} kappa2={r.theta.kappa2.tolist()} "
            f"phi={r.theta.phi.tolist()} converged={r.converged}"
        )


@app.command("excursions")
def excursions_cmd(
    fit_dir: str = typer.Argument(..., help="Directory written by fit-em"),
    out: str | None = typer.Option(None, "--out", help="Output directory"),
    gamma: str = typer.Option("0,0.5,1", "--gamma", help="Thresholds, comma-separated"),
    alpha: float = typer.Option(0.01, "--alpha", help="1 - joint probability"),
    samples: int = typer.Option(DEFAULT_SAMPLES, "--samples", help="Posterior draws"),
    seed: int = typer.Option(0, "--seed", help="Sampling seed"),
) -> None:
    """Nested joint excursion sets of the fitted fields."""
    from .controller import excursions_to_dir

    gammas = _floats(gamma, "--gamma")
    with _errors():
        results = excursions_to_dir(
            Path(fit_dir),
            _out(out, "excursions"),
            gammas=gammas,
            alpha=alpha,
            samples=samples,
            seed=seed,
        )
    for g, res in results.items():
        typer.echo(f"gamma={g:g}: active={res.counts.tolist()} joint={res.joint_prob.round(4).tolist()}")


@app.command("group")
def group_cmd(
    fit_dirs: list[str] = typer.Argument(None, help="Subject fit directories"),
    subjects: str | None = typer.Option(
        None, "--subjects", help="Directory whose subdirectories are subject fits"
    ),
    out: str | None = typer.Option(None, "--out", help="Output directory"),
    draws: int = typer.Option(200, "--draws", help="Group posterior draws"),
    gamma: str = typer.Option("0,0.5,1", "--gamma", help="Thresholds, comma-separated"),
    alpha: float = typer.Option(0.01, "--alpha", help="1 - joint probability"),
    pooling: str = typer.Option("sum", "--pooling", help="sum|average"),
    weights: str | None = typer.Option(None, "--weights", help="Subject weights, comma-separated"),
    seed: int = typer.Option(0, "--seed", help="Sampling seed"),
) -> None:
    """Combine subject fits into group estimates and group excursion sets."""
    from .controller import group_to_dir

    dirs = [Path(d) for d in fit_dirs or []]
    if subjects:
        root = Path(subjects)
        if not root.is_dir():
            typer.echo(f"Error: {root} is not a directory", err=True)
            raise typer.Exit(1)
        dirs += sorted(p for p in root.iterdir() if (p / "theta.json").exists())
    if len(dirs) < 2:
        typer.echo("Error: need at least 2 subject fit directories", err=True)
        raise typer.Exit(1)
    gammas = _floats(gamma, "--gamma")
    w = _floats(weights, "--weights") if weights else None
    with _errors():
        result = group_to_dir(
            dirs,
            _out(out, "group"),
            draws=draws,
            gammas=gammas,
            alpha=alpha,
            pooling=pooling,
            weights=w,
            seed=seed,
        )
    typer.echo(
        f"group of {len(dirs)}: sigma2={result.theta_G.sigma2:.6g} "
        f"kappa2={result.theta_G.kappa2.tolist()}"
    )


@app.command("benchmark")
def benchmark_cmd(
    n: list[int] = typer.Option([2000], "--n", help="Vertex counts (repeatable)"),
    k: list[int] = typer.Option([2], "--k", help="Task counts (repeatable)"),
    replicates: int = typer.Option(10, "--replicates", help="Datasets per condition"),
    out: str | None = typer.Option(None, "--out", help="Output directory"),
    sim_config: str | None = typer.Option(None, "--sim-config", help="Base simulation settings (JSON)"),
    config: str | None = typer.Option(None, "--config", help="EM settings (JSON)"),
    tolerances: str | None = typer.Option(
        None, "--tolerances", help="Also sweep these EM tolerances, comma-separated"
    ),
    datasets: int = typer.Option(9, "--datasets", help="Datasets for the tolerance sweep"),
    seed: int = typer.Option(0, "--seed", help="Root seed for all replicates"),
) -> None:
    """Time and RMSE of the classical and EM fitters over simulated conditions."""
    from .benchmark import parse_conditions
    from .controller import benchmark_to_dir
    from .simulator import SimConfig

    tols = _floats(tolerances, "--tolerances") if tolerances else []
    with _errors():
        base = SimConfig.from_json(Path(sim_config)) if sim_config else SimConfig()
        em = _em_config(config, None, None, False, None, False, seed)
        frame = benchmark_to_dir(
            parse_conditions(n, k),
            replicates,
            _out(out, "benchmark"),
            base=base,
            em_config=em,
            seed=seed,
            tolerances=tols,
            datasets=datasets if tols else 0,
        )
    failures = int(frame["error"].notna().sum())
    typer.echo(f"{len(frame)} rows, {failures} failures")


@app.command("plot")
def plot_cmd(
    fit_dir: str = typer.Argument(..., help="Directory written by fit-em"),
    out: str | None = typer.Option(None, "--out", help="Output directory"),
    excursions: str | None = typer.Option(
        None, "--excursions", help="Directory written by excursions"
    ),
    truth: str | None = typer.Option(None, "--truth", help="truth.json written by simulate"),
    seed: int = typer.Option(0, "--seed", help="Unused; accepted for a uniform interface"),
) -> None:
    """Heatmaps of the estimates and three-color activation maps."""
    from .controller import emit_figures

    with _errors():
        paths = emit_figures(
            Path(fit_dir),
            _out(out, "plot"),
            excursion_dir=Path(excursions) if excursions else None,
            truth=Path(truth) if truth else None,
        )
    for p in paths:
        typer.echo(str(p))


if __name__ == "__main__":
    app()
