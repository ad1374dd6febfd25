"""Experiment pipeline: configuration, dataset generation, training and
evaluation. The CLI is a thin layer over these functions."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import diagnostics as dg
from . import qg as qgm
from .calibrate import TrainConfig, train_closure
from .closure import ClosureParams, LinearSpectral, LocalStencil, NoClosure
from .coarsegrain import CoarsenSpec, iter_training_series, stride_for
from .storage import SnapshotFile, config_hash, read_manifest, sha256_file, write_manifest

log = logging.getLogger(__name__)

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "qg": {
        "Lx": 1.0e6,
        "Ly": 1.0e6,
        "H1": 500.0,
        "H2": 5000.0,
        "Ubar1": 0.025,
        "beta": 1.0e-11,
        "gamma": 7.0e-8,
        "rd": 15.0e3,
        "nx": 128,
        "dt": 900.0,
    },
    "coarse": {"nx": 32, "dt": 7200.0},
    "generate": {"spinup_years": 6.0, "years": 1.0},
    "closure": {"family": "linear_spectral", "stochastic": True, "n_bands": 8},
    "train": {
        "curriculum": [[1, 40], [4, 40], [12, 30], [36, 20], [108, 12], [288, 8]],
        "population": 16,
        "sigma": 0.1,
        "lr": 0.1,
        "decay": 0.97,
        "batch": 4,
        "monitor": 8,
        "monitor_every": 2,
        "S": 4,
    },
    "evaluate": {"horizon": 36, "S": 4, "windows": 24, "long_run_years": 10.0, "sample_every": 12},
}


class SeedCollision(ValueError):
    """Training and validation data come from the same seed."""


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = DEFAULT_CONFIG
    if path is not None:
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        with open(path, "rb") as fh:
            cfg = merge(cfg, tomllib.load(fh))
    if overrides:
        cfg = merge(cfg, overrides)
    unknown = set(cfg) - set(DEFAULT_CONFIG)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def fine_params(cfg: dict) -> qgm.QgParams:
    q = cfg["qg"]
    return qgm.QgParams(
        Lx=q["Lx"], Ly=q["Ly"], H1=q["H1"], H2=q["H2"], Ubar1=q["Ubar1"], beta=q["beta"],
        gamma=q["gamma"], rd=q["rd"], nx=int(q["nx"]), ny=int(q.get("ny", q["nx"])), dt=q["dt"],
    )


def coarse_params(cfg: dict) -> qgm.QgParams:
    c = cfg["coarse"]
    return qgm.QgParams(**{**fine_params(cfg).to_dict(), "nx": int(c["nx"]), "ny": int(c.get("ny", c["nx"])), "dt": c["dt"]})


def closure_family(cfg: dict):
    c = cfg["closure"]
    if c["family"] == "linear_spectral":
        return LinearSpectral(n_bands=int(c.get("n_bands", 8)), stochastic_=bool(c["stochastic"]))
    if c["family"] == "local_stencil":
        return LocalStencil(stochastic_=bool(c["stochastic"]))
    if c["family"] == "none":
        return NoClosure()
    raise ValueError(f"unknown closure family {c['family']!r}")


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        curriculum=tuple(tuple(c) for c in t["curriculum"]),
        population=int(t["population"]),
        sigma=float(t["sigma"]),
        lr=float(t["lr"]),
        sigma_decay=float(t["decay"]),
        lr_decay=float(t["decay"]),
        batch=int(t["batch"]),
        monitor=int(t["monitor"]),
        monitor_every=int(t.get("monitor_every", 2)),
        S=int(t["S"]),
    )


def _stamp(cfg: dict) -> dict:
    return {"config_hash": config_hash(cfg), "code_version": __version__}


# -- generate ------------------------------------------------------------------


def generate(cfg: dict, out, seed: int | None = None, resume: bool = False) -> dict:
    """Spin up the fine model, run the production period and store coarse
    snapshots every coarse step. Returns the manifest."""
    seed = cfg["seed"] if seed is None else seed
    cfg = merge(cfg, {"seed": seed})
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if resume and (out / "manifest.json").exists():
        man = read_manifest(out)
        if man.get("config_hash") == config_hash(cfg) and sha256_file(out / "series.cgqg") == man["sha256"]:
            log.info("dataset already complete at %s", out)
            return man
    fp, cp = fine_params(cfg), coarse_params(cfg)
    spec = CoarsenSpec(fp.grid, cp.grid, cp.ssd_cutoff, cp.ssd_alpha)
    stride = stride_for(fp.dt, cp.dt)
    g = cfg["generate"]
    spin = float(g["spinup_years"]) * qgm.SECONDS_PER_YEAR
    nsteps = int(round(float(g["years"]) * qgm.SECONDS_PER_YEAR / fp.dt))
    n_snap = nsteps // stride
    if n_snap:
        q0 = qgm.spin_up(fp, seed, spin)
        state = qgm.initial_state(q0, fp)

        def source():
            for _ in range(n_snap * stride):
                qgm.step(state, fp)
                yield qgm.physical(state, fp)

        series = np.stack(list(iter_training_series(source(), spec, stride)))
    else:
        series = np.empty((0, 2) + cp.grid.shape)
    digest = SnapshotFile(series, cp.dt, spin, cp.digest()).save(out / "series.cgqg")
    man = {
        "kind": "dataset",
        "seed": seed,
        "n_snapshots": int(len(series)),
        "coarse_dt": cp.dt,
        "fine_params_hash": fp.digest(),
        "coarse_params_hash": cp.digest(),
        "spinup_seconds": spin,
        "sha256": digest,
        **_stamp(cfg),
    }
    write_manifest(out / "manifest.json", man)
    return man


def load_series(dataset) -> tuple[np.ndarray, dict]:
    d = Path(dataset)
    man = read_manifest(d)
    path = d / "series.cgqg"
    if sha256_file(path) != man["sha256"]:
        raise ValueError(f"{path} does not match its manifest hash")
    return SnapshotFile.load(path).data, man


# -- train ---------------------------------------------------------------------


def train(cfg: dict, dataset, out, seed: int | None = None, resume: bool = False) -> dict:
    seed = cfg["seed"] if seed is None else seed
    series, dman = load_series(dataset)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    tcfg = train_config(cfg)
    start = 0
    if resume:
        start = sum(1 for k in range(len(tcfg.curriculum)) if (out / f"phase{k}.cgcl").exists())
    res = train_closure(series, closure_family(cfg), tcfg, coarse_params(cfg), seed, checkpoint_dir=out, start_phase=start)
    res.params.save(out / "closure.cgcl")
    res.record.save(out / "record.csv")
    man = {
        "kind": "checkpoint",
        "seed": seed,
        "dataset_seed": dman["seed"],
        "dataset_sha256": dman["sha256"],
        "phases": [[int(w), int(n)] for w, n in tcfg.curriculum],
        "phase_loss": [None if not np.isfinite(x) else float(f"{x:.17g}") for x in res.phase_loss],
        "closure_sha256": sha256_file(out / "closure.cgcl"),
        "record_sha256": sha256_file(out / "record.csv"),
        **_stamp(cfg),
    }
    write_manifest(out / "manifest.json", man)
    return man


# -- evaluate ------------------------------------------------------------------


@dataclass
class Evaluation:
    names: list
    delta_e: dict
    reports: dict
    curves: dict
    truth: dg.IsotropicSpectrum
    spectra: dict = field(default_factory=dict)

    def rows(self) -> list:
        out = []
        for n in self.names:
            r = self.reports[n]
            out.append((f"{n}.survived", str(int(r.survived))))
            out.append((f"{n}.survival_time_s", f"{r.survival_time:.17g}"))
            if n in self.delta_e:
                out.append((f"{n}.delta_e", f"{self.delta_e[n]:.17g}"))
        return out


def check_disjoint(train_manifest: dict | None, valid_manifest: dict) -> None:
    if train_manifest is not None and train_manifest.get("seed") == valid_manifest.get("seed"):
        raise SeedCollision(f"training and validation data share seed {valid_manifest.get('seed')}")


def evaluate_closures(
    closures: dict,
    valid: np.ndarray,
    params: qgm.QgParams,
    ecfg: dict,
    seed: int,
    curves: bool = True,
) -> Evaluation:
    """Score curves, long free runs and spectrum errors for named closures.

    A ``"none"`` entry is added when missing, so the no-closure baseline is
    always reported.
    """
    closures = dict(closures)
    closures.setdefault("none", ClosureParams.none())
    names = list(closures)
    truth = dg.kinetic_energy_spectrum(valid, params)
    duration = float(ecfg["long_run_years"]) * qgm.SECONDS_PER_YEAR
    reports = dict(
        zip(names, dg.long_runs([closures[n] for n in names], params, duration, seed, valid[0], sample_every=int(ecfg["sample_every"])))
    )
    delta = {n: dg.spectrum_error(r.spectrum, truth) for n, r in reports.items() if r.survived and r.spectrum is not None}
    sc = {}
    if curves:
        for n in names:
            sc[n] = dg.score_curve(valid, closures[n], params, int(ecfg["horizon"]), int(ecfg["S"]), seed, max_windows=int(ecfg["windows"]))
    return Evaluation(names, delta, reports, sc, truth, {n: r.spectrum for n, r in reports.items() if r.spectrum is not None})


def evaluate(cfg: dict, checkpoints: list, dataset, out, seed: int | None = None, train_dataset=None) -> Evaluation:
    seed = cfg["seed"] if seed is None else seed
    valid, vman = load_series(dataset)
    tman = read_manifest(train_dataset) if train_dataset is not None else None
    check_disjoint(tman, vman)
    for ck in checkpoints:
        cman_path = Path(ck).parent / "manifest.json"
        if cman_path.exists():
            cman = read_manifest(cman_path)
            check_disjoint({"seed": cman.get("dataset_seed")}, vman)
    closures = {Path(ck).stem if Path(ck).stem != "closure" else Path(ck).parent.name: ClosureParams.load(ck) for ck in checkpoints}
    params = coarse_params(cfg)
    ev = evaluate_closures(closures, valid, params, cfg["evaluate"], seed)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    stamp = _stamp(cfg)
    ev.truth.to_csv(out / "spectrum_truth.csv", stamp)
    for n, s in ev.spectra.items():
        s.to_csv(out / f"spectrum_{n}.csv", stamp)
    for n, c in ev.curves.items():
        c.to_csv(out / f"score_{n}.csv", stamp)
    rows = [("config_hash", stamp["config_hash"]), ("code_version", stamp["code_version"]), ("seed", str(seed))] + ev.rows()
    (out / "report.csv").write_text("key,value\n" + "".join(f"{k},{v}\n" for k, v in rows))
    return ev
