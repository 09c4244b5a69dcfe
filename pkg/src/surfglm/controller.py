"""Pipeline stages that read and write artifact directories; the CLI delegates here."""

from __future__ import annotations

import json
import logging
import time
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from .artifacts import (
    FIT_FILES,
    atomic_write_json,
    atomic_write_text,
    read_design,
    read_fit_dir,
    read_mesh,
    read_response,
    require_files,
    write_design,
    write_fit_dir,
    write_mesh,
    write_response,
    write_theta,
)
from .benchmark import Condition, benchmark, summarize, tolerance_sweep
from .classical_glm import activation_ttest, fit_classical
from .config import DEFAULT_ALPHA, DEFAULT_GAMMAS, DEFAULT_SAMPLES, PROJECTION_TOL_MM
from .em_engine import EmConfig, EmResult, SufficientStats, fit_hemispheres, run_em
from .excursions import ExcursionResult, excursion_sets
from .figures import activation_map, heatmap, rmse_boxes, time_bars, tolerance_plot
from .group_level import SubjectSummary, combine_subjects
from .manifest import RunManifest
from .mesh import Projector, TriangularMesh, assemble_fem, build_projector
from .preprocess import HrfParams, SessionData, preprocess_session
from .simulator import SimConfig, simulate

logger = logging.getLogger(__name__)

__all__ = [
    "run_label",
    "load_session",
    "simulate_to_dir",
    "preprocess_to_dir",
    "fit_classical_to_dir",
    "fit_em_to_dir",
    "fit_em_jobs_to_dir",
    "excursions_to_dir",
    "group_to_dir",
    "benchmark_to_dir",
    "emit_figures",
]


def run_label(subject: int, session: int, run: int) -> str:
    return f"sub-{subject:02d}_ses-{session:02d}_run-{run:02d}"


def _gamma_name(gamma: float) -> str:
    return f"active_gamma-{gamma:g}.csv"


def _write_frame(path: Path, frame: pd.DataFrame) -> Path:
    atomic_write_text(path, frame.to_csv(index=False, float_format="%.17g"))
    return path


def _write_table(path: Path, values: np.ndarray, columns: list[str]) -> Path:
    return _write_frame(path, pd.DataFrame(values, columns=columns))


def _write_run(out: Path, session: SessionData, stimulus: np.ndarray | None = None) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    write_response(out / "Y.csv", session.Y)
    write_design(out / "X.csv", session.X, session.task_names)
    written = [out / "Y.csv", out / "X.csv"]
    if stimulus is not None:
        write_design(out / "stimulus.csv", stimulus, session.task_names)
        written.append(out / "stimulus.csv")
    atomic_write_json(
        out / "meta.json",
        {"TR": session.TR, "whitened": session.whitened, "task_names": session.task_names},
    )
    return written + [out / "meta.json"]


def load_session(run_dir: Path) -> SessionData:
    run_dir = Path(run_dir)
    require_files([run_dir / "Y.csv", run_dir / "X.csv", run_dir / "meta.json"])
    meta = json.loads((run_dir / "meta.json").read_text(encoding="utf-8"))
    X, names = read_design(run_dir / "X.csv")
    return SessionData(
        Y=read_response(run_dir / "Y.csv"),
        X=X,
        TR=float(meta.get("TR", 1.0)),
        whitened=bool(meta.get("whitened", False)),
        task_names=list(meta.get("task_names") or names),
    )


def _load_locations(path: Path | None, mesh: TriangularMesh) -> Projector | None:
    if path is None:
        return None
    coords = pd.read_csv(path).to_numpy(dtype=float)
    return build_projector(mesh, coords, tol=PROJECTION_TOL_MM)


def simulate_to_dir(config: SimConfig, out: Path, config_path: Path | None = None) -> Path:
    """mesh.txt, truth.json and one directory per run under runs/."""
    out = Path(out)
    manifest = RunManifest(command="simulate", config=config.to_dict())
    manifest.add_seed("simulate", config.seed)
    if config_path is not None:
        manifest.add_input(config_path)
    with manifest.stage("simulate"):
        sessions, truth, mesh = simulate(config)
    written: list[Path] = []
    with manifest.stage("write"):
        write_mesh(out / "mesh.txt", mesh)
        atomic_write_json(out / "truth.json", truth.to_dict())
        written += [out / "mesh.txt", out / "truth.json"]
        for session, stimulus, label in zip(sessions, truth.stimuli, truth.labels):
            written += _write_run(out / "runs" / run_label(*label), session, stimulus)
    manifest.add_outputs(written, root=out)
    manifest.write(out)
    logger.info(f"wrote {len(sessions)} simulated runs to {out}")
    return out


def preprocess_to_dir(
    run_dir: Path,
    mesh_path: Path,
    out: Path,
    *,
    hrf: HrfParams | None = None,
    order: int,
    fwhm: float,
    scale: bool = True,
) -> Path:
    """Raw Y.csv + stimulus.csv (+ optional Z.csv) into a whitened run directory."""
    run_dir, out = Path(run_dir), Path(out)
    inputs = [run_dir / "Y.csv", run_dir / "stimulus.csv", Path(mesh_path)]
    require_files(inputs)
    hrf = hrf or HrfParams()
    manifest = RunManifest(
        command="preprocess",
        config={"hrf": hrf.to_dict(), "order": order, "fwhm": fwhm, "scale": scale},
    )
    nuisance = run_dir / "Z.csv"
    if nuisance.exists():
        inputs.append(nuisance)
    for p in inputs:
        manifest.add_input(p)

    mesh = read_mesh(mesh_path)
    stimulus, names = read_design(run_dir / "stimulus.csv")
    Z = pd.read_csv(nuisance).to_numpy(dtype=float) if nuisance.exists() else None
    with manifest.stage("preprocess"):
        session, model = preprocess_session(
            read_response(run_dir / "Y.csv"),
            stimulus,
            mesh,
            Z=Z,
            hrf=hrf,
            order=order,
            fwhm=fwhm,
            task_names=names,
            scale=scale,
        )
    written = _write_run(out, session)
    cols = [f"a{j + 1}" for j in range(model.order)]
    ar = np.column_stack([model.coefs, model.variances]) if model.order else model.variances[:, None]
    written.append(_write_table(out / "ar.csv", ar, cols + ["variance"]))
    manifest.add_outputs(written, root=out)
    manifest.write(out)
    return out


def fit_classical_to_dir(
    run_dir: Path,
    out: Path,
    *,
    gamma: float = 0.0,
    alpha: float = 0.05,
    correction: str = "bonferroni",
) -> Path:
    run_dir, out = Path(run_dir), Path(out)
    session = load_session(run_dir)
    manifest = RunManifest(
        command="fit-classical", config={"gamma": gamma, "alpha": alpha, "correction": correction}
    )
    for name in ("Y.csv", "X.csv"):
        manifest.add_input(run_dir / name)
    with manifest.stage("fit"):
        fit = fit_classical(session)
        active = activation_ttest(fit, gamma=gamma, alpha=alpha, correction=correction)  # type: ignore[arg-type]
    names = session.task_names or []
    written = [
        _write_table(out / "beta.csv", fit.beta_hat, names),
        _write_table(out / "se.csv", fit.se, names),
        _write_table(out / "active.csv", active.astype(int), names),
    ]
    atomic_write_json(
        out / "summary.json",
        {"dof": fit.dof, "rank_deficient": int(fit.rank_deficient.sum()),
         "active": active.sum(axis=0).tolist()},
    )  # fmt: skip
    written.append(out / "summary.json")
    manifest.add_outputs(written, root=out)
    manifest.write(out)
    logger.info(f"classical fit written to {out}")
    return out


def _write_em(
    out: Path,
    result: EmResult,
    stats: SufficientStats,
    mesh: TriangularMesh,
    names: list[str],
    manifest: RunManifest,
    locations: Path | None = None,
) -> None:
    written = write_fit_dir(out, result, stats, mesh, names)
    if locations is not None:
        coords = pd.read_csv(locations)
        _write_table(out / "locations.csv", coords.to_numpy(dtype=float), list(coords.columns))
        written.append(out / "locations.csv")
    manifest.record_stage("em", result.seconds)
    manifest.add_outputs(written, root=out)
    manifest.write(out)


def fit_em_to_dir(
    run_dirs: Sequence[Path],
    mesh_path: Path,
    out: Path,
    config: EmConfig,
    locations: Path | None = None,
) -> EmResult:
    """Fit one Theta shared by every run in `run_dirs`."""
    out = Path(out)
    require_files([Path(mesh_path), *(Path(r) / "meta.json" for r in run_dirs)])
    manifest = RunManifest(command="fit-em", config=config.to_dict())
    manifest.add_seed("em", config.seed)
    manifest.add_input(Path(mesh_path), "mesh.txt")
    with manifest.stage("load"):
        mesh = read_mesh(mesh_path)
        sessions = [load_session(r) for r in run_dirs]
        for r in run_dirs:
            manifest.add_input(Path(r) / "Y.csv", f"{Path(r).name}/Y.csv")
            manifest.add_input(Path(r) / "X.csv", f"{Path(r).name}/X.csv")
        projector = _load_locations(locations, mesh)
        stats = SufficientStats.from_sessions(sessions, projector)
    result = run_em(sessions, mesh, config, projector=projector, stats=stats)
    _write_em(out, result, stats, mesh, sessions[0].task_names or [], manifest, locations)
    return result


def fit_em_jobs_to_dir(jobs_path: Path, out: Path, config: EmConfig) -> dict[str, EmResult]:
    """Independent meshes (hemispheres) listed in a JSON file, fitted in parallel.

    The file maps a job name to {"mesh": path, "runs": [run dirs]}; relative paths are
    resolved against the file's directory. Each job gets its own fit directory.
    """
    jobs_path = Path(jobs_path)
    require_files([jobs_path])
    jobs: dict[str, Any] = json.loads(jobs_path.read_text(encoding="utf-8"))
    base = jobs_path.parent
    names = list(jobs)
    meshes, sessions = [], []
    for name in names:
        mesh_path = base / jobs[name]["mesh"]
        runs = [base / r for r in jobs[name]["runs"]]
        require_files([mesh_path, *(r / "meta.json" for r in runs)])
        meshes.append(read_mesh(mesh_path))
        sessions.append([load_session(r) for r in runs])
    results = fit_hemispheres(list(zip(sessions, meshes)), config)
    for name, mesh, runs, result in zip(names, meshes, sessions, results):
        manifest = RunManifest(command="fit-em", config={**config.to_dict(), "job": name})
        manifest.add_seed("em", config.seed)
        manifest.add_input(jobs_path)
        stats = SufficientStats.from_sessions(runs)
        _write_em(Path(out) / name, result, stats, mesh, runs[0].task_names or [], manifest)
    return dict(zip(names, results))


def _write_excursions(
    out: Path,
    results: dict[float, ExcursionResult],
    names: list[str],
    mesh: TriangularMesh,
) -> list[Path]:
    written = []
    summary = {}
    for gamma, res in results.items():
        written.append(_write_table(out / _gamma_name(gamma), res.active.astype(int), names))
        summary[f"{gamma:g}"] = {
            "joint_prob": res.joint_prob.tolist(),
            "active": res.counts.tolist(),
            "alpha": res.alpha,
            "samples": res.samples,
        }
    atomic_write_json(out / "summary.json", summary)
    written.append(out / "summary.json")
    first = next(iter(results.values()), None)
    if first is not None and first.active.shape[0] == mesh.n:
        for k, name in enumerate(names):
            sets = {g: r.active[:, k] for g, r in results.items()}
            written.append(activation_map(mesh, sets, out / f"map_{name}.png", title=name))
    else:
        logger.info("data locations are not the mesh vertices; skipping activation maps")
    return written


def excursions_to_dir(
    fit_dir: Path,
    out: Path,
    *,
    gammas: Sequence[float] = DEFAULT_GAMMAS,
    alpha: float = DEFAULT_ALPHA,
    samples: int = DEFAULT_SAMPLES,
    seed: int = 0,
) -> dict[float, ExcursionResult]:
    fit_dir, out = Path(fit_dir), Path(out)
    bundle = read_fit_dir(fit_dir)
    manifest = RunManifest(
        command="excursions",
        config={"gammas": list(gammas), "alpha": alpha, "samples": samples},
    )
    manifest.add_seed("excursions", seed)
    for name in FIT_FILES:
        manifest.add_input(fit_dir / name)
    locations = fit_dir / "locations.csv"
    projector = _load_locations(locations if locations.exists() else None, bundle.mesh)
    with manifest.stage("excursions"):
        results = excursion_sets(
            bundle.posterior(),
            projector or Projector.eye(bundle.mesh.n),
            gammas,
            alpha=alpha,
            samples=samples,
            seed=seed,
        )
    written = _write_excursions(out, results, bundle.task_names, bundle.mesh)
    manifest.add_outputs(written, root=out)
    manifest.write(out)
    return results


def group_to_dir(
    fit_dirs: Sequence[Path],
    out: Path,
    *,
    draws: int = 200,
    gammas: Sequence[float] = DEFAULT_GAMMAS,
    alpha: float = DEFAULT_ALPHA,
    pooling: str = "sum",
    weights: Sequence[float] | None = None,
    seed: int = 0,
):
    out = Path(out)
    if weights is not None and len(weights) != len(fit_dirs):
        raise ValueError(f"{len(weights)} weights for {len(fit_dirs)} subjects")
    manifest = RunManifest(
        command="group",
        config={"draws": draws, "gammas": list(gammas), "alpha": alpha, "pooling": pooling,
                "weights": None if weights is None else list(weights)},
    )  # fmt: skip
    manifest.add_seed("group", seed)
    bundles = [read_fit_dir(d) for d in fit_dirs]
    for d in fit_dirs:
        manifest.add_input(Path(d) / "theta.json", f"{Path(d).name}/theta.json")
    summaries = [
        SubjectSummary(
            stats=b.stats,
            theta=b.theta,
            weight=None if weights is None else float(weights[i]),
            name=Path(fit_dirs[i]).name,
        )
        for i, b in enumerate(bundles)
    ]
    mesh = bundles[0].mesh
    with manifest.stage("group"):
        result = combine_subjects(
            summaries,
            assemble_fem(mesh),
            draws,
            pooling=pooling,  # type: ignore[arg-type]
            gammas=gammas,
            alpha=alpha,
            seed=seed,
        )
    names = bundles[0].task_names
    write_theta(out / "theta_group.json", result.theta_G)
    written = [
        out / "theta_group.json",
        _write_table(out / "group_mean.csv", result.mean_fields.T, names),
    ]
    written += _write_excursions(out, result.excursions, names, mesh)
    manifest.add_outputs(written, root=out)
    manifest.write(out)
    return result


def benchmark_to_dir(
    conditions: Sequence[Condition],
    replicates: int,
    out: Path,
    *,
    base: SimConfig | None = None,
    em_config: EmConfig | None = None,
    seed: int = 0,
    tolerances: Sequence[float] = (),
    datasets: int = 0,
) -> pd.DataFrame:
    out = Path(out)
    base = base or SimConfig()
    em_config = em_config or EmConfig()
    manifest = RunManifest(
        command="benchmark",
        config={
            "conditions": [[c.n, c.K] for c in conditions],
            "replicates": replicates,
            "simulation": base.to_dict(),
            "em": em_config.to_dict(),
            "tolerances": list(tolerances),
            "datasets": datasets,
        },
    )
    manifest.add_seed("benchmark", seed)
    t0 = time.perf_counter()
    frame = benchmark(conditions, replicates, base, em_config, seed=seed)
    manifest.record_stage("benchmark", time.perf_counter() - t0)
    written = [
        _write_frame(out / "results.csv", frame),
        _write_frame(out / "summary.csv", summarize(frame)),
        time_bars(frame, out / "time.png"),
        rmse_boxes(frame, out / "rmse.png"),
    ]
    if tolerances and datasets:
        with manifest.stage("tolerance_sweep"):
            sweep = tolerance_sweep(tolerances, datasets, base, em_config, seed=seed)
        written += [
            _write_frame(out / "tolerance.csv", sweep),
            tolerance_plot(sweep, out / "tolerance.png", tolerances),
        ]
    manifest.add_outputs(written, root=out)
    manifest.write(out)
    return frame


def emit_figures(
    fit_dir: Path,
    out: Path,
    *,
    excursion_dir: Path | None = None,
    truth: Path | None = None,
) -> list[Path]:
    """Estimate heatmaps, optional truth heatmaps on the same scale, and activation maps."""
    fit_dir, out = Path(fit_dir), Path(out)
    needed = [fit_dir / "posterior_mean.csv", fit_dir / "mesh.txt"]
    if truth is not None:
        needed.append(Path(truth))
    if excursion_dir is not None:
        needed.append(Path(excursion_dir) / "summary.json")
    require_files(needed)

    mesh = read_mesh(fit_dir / "mesh.txt", check_connected=False)
    frame = pd.read_csv(fit_dir / "posterior_mean.csv")
    names = list(frame.columns)
    estimate = frame.to_numpy(dtype=float).T
    fields = [estimate]
    truth_beta = None
    if truth is not None:
        truth_beta = np.asarray(json.loads(Path(truth).read_text(encoding="utf-8"))["beta"], dtype=float)
        if truth_beta.shape != estimate.shape:
            raise ValueError(f"truth has shape {truth_beta.shape}, estimate {estimate.shape}")
        fields.append(truth_beta)
    vmax = float(max(np.abs(f).max() for f in fields)) or 1.0

    written = []
    for k, name in enumerate(names):
        written.append(heatmap(mesh, estimate[k], out / f"estimate_{name}.png", name, vmax))
        if truth_beta is not None:
            written.append(heatmap(mesh, truth_beta[k], out / f"truth_{name}.png", name, vmax))

    if excursion_dir is not None:
        excursion_dir = Path(excursion_dir)
        summary = json.loads((excursion_dir / "summary.json").read_text(encoding="utf-8"))
        gammas = sorted(float(g) for g in summary)
        require_files([excursion_dir / _gamma_name(g) for g in gammas])
        tables = {g: pd.read_csv(excursion_dir / _gamma_name(g)) for g in gammas}
        for name in names:
            sets = {g: t[name].to_numpy().astype(bool) for g, t in tables.items()}
            written.append(activation_map(mesh, sets, out / f"map_{name}.png", title=name))
    logger.info(f"wrote {len(written)} figures to {out}")
    return written
