"""Experiment harness: sampling, training, and the prediction studies.

Training draws random 2x2 component arrays with random inflow conditions,
solves the full-order problem, and routes the per-subdomain restrictions
into snapshot sets per reference component.  Prediction studies assemble
larger grids from the trained per-component artifacts and compare the
reduced solutions against fresh full-order solves.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .femspace import TaylorHoodSpace
from .fom import assemble_global, solve_newton
from .geometry import (
    GridConfig,
    SideBC,
    generate_empty_mesh,
    generate_obstacle_mesh,
)
from .eqp import build_manifest, train_rule
from .reduction import (
    SnapshotSet,
    build_advection_tensor,
    build_pod_basis,
    missing_energy,
    project_linear,
)
from .rom import (
    EQP,
    TENSORIAL,
    assemble_global_rom,
    lift,
    relative_errors,
    solve_rom_newton,
)
from .weakforms import assemble_interface_blocks, build_component_operators

log = logging.getLogger("cromflow")


@dataclass
class InflowSample:
    """One random inflow: mean velocity plus a sinusoidal perturbation."""

    g1: float
    g2: float
    dg1: float
    dg2: float
    k1: np.ndarray
    k2: np.ndarray
    th1: float
    th2: float

    def velocity(self):
        g1, g2, dg1, dg2 = self.g1, self.g2, self.dg1, self.dg2
        k1, k2, th1, th2 = self.k1, self.k2, self.th1, self.th2

        def g(xy):
            xy = np.atleast_2d(xy)
            return np.stack(
                [
                    g1 + dg1 * np.sin(2 * np.pi * (xy @ k1 + th1)),
                    g2 + dg2 * np.sin(2 * np.pi * (xy @ k2 + th2)),
                ],
                axis=-1,
            )

        return g

    def as_row(self) -> dict:
        return {
            "g1": self.g1,
            "g2": self.g2,
            "dg1": self.dg1,
            "dg2": self.dg2,
            "k1x": self.k1[0],
            "k1y": self.k1[1],
            "k2x": self.k2[0],
            "k2y": self.k2[1],
            "th1": self.th1,
            "th2": self.th2,
        }


def sample_inflow(rng: np.random.Generator) -> InflowSample:
    """Draw one inflow from the training distribution."""
    return InflowSample(
        g1=rng.uniform(-1.0, 1.0),
        g2=rng.uniform(-1.0, 1.0),
        dg1=rng.uniform(-0.1, 0.1),
        dg2=rng.uniform(-0.1, 0.1),
        k1=rng.uniform(-0.5, 0.5, size=2),
        k2=rng.uniform(-0.5, 0.5, size=2),
        th1=rng.uniform(0.0, 1.0),
        th2=rng.uniform(0.0, 1.0),
    )


def bc_from_sample(sample: InflowSample) -> dict:
    """Dirichlet on strictly upwind sides, homogeneous Neumann elsewhere.

    A zero mean component leaves both transverse sides Neumann, so the
    problem always keeps an outflow.
    """
    g = sample.velocity()
    bc = {side: SideBC("neumann") for side in ("L", "R", "B", "T")}
    if sample.g1 > 0.0:
        bc["L"] = SideBC("dirichlet", g)
    elif sample.g1 < 0.0:
        bc["R"] = SideBC("dirichlet", g)
    if sample.g2 > 0.0:
        bc["B"] = SideBC("dirichlet", g)
    elif sample.g2 < 0.0:
        bc["T"] = SideBC("dirichlet", g)
    if not any(s.kind == "dirichlet" for s in bc.values()):
        raise ValueError("inflow sample has no upwind side (zero mean velocity)")
    return bc


@dataclass
class ExperimentConfig:
    """Knobs for training and the prediction studies (desk-scale defaults)."""

    n_per_side: int = 8
    components: tuple = ("empty", "square", "circle")
    square_half_width: float = 0.25
    circle_half_width: float = 0.2
    reynolds: float = 25.0
    train_samples: int = 200
    train_rows: int = 2
    train_cols: int = 2
    basis_size: int = 30                      # velocity modes R_u
    pressure_basis_size: Optional[int] = None  # defaults to basis_size
    supremizer_size: Optional[int] = None      # defaults to pressure basis size
    eqp_tol: Optional[float] = None            # defaults to the missing-energy ratio
    predict_sizes: tuple = (2, 4, 8)
    tests_per_size: int = 20
    seed: int = 0
    timing_repeats: int = 1
    newton_tol: float = 1e-8
    newton_max_iter: int = 50

    @property
    def viscosity(self) -> float:
        return 1.0 / self.reynolds

    @property
    def r_p(self) -> int:
        return self.pressure_basis_size or self.basis_size

    @property
    def z(self) -> int:
        return self.supremizer_size if self.supremizer_size is not None else self.r_p

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        data = json.loads(Path(path).read_text())
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key in ("components", "predict_sizes"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)

    def to_json(self, path) -> None:
        data = asdict(self)
        data["components"] = list(self.components)
        data["predict_sizes"] = list(self.predict_sizes)
        Path(path).write_text(json.dumps(data, indent=2) + "\n")


def build_component_meshes(cfg: ExperimentConfig) -> dict:
    meshes = {}
    for name in cfg.components:
        if name == "empty":
            meshes[name] = generate_empty_mesh(cfg.n_per_side)
        elif name == "square":
            meshes[name] = generate_obstacle_mesh(cfg.n_per_side, "square", cfg.square_half_width)
        elif name == "circle":
            meshes[name] = generate_obstacle_mesh(cfg.n_per_side, "circle", cfg.circle_half_width)
        else:
            raise ValueError(f"unknown component {name!r} (use mesh import for custom shapes)")
    return meshes


@dataclass
class ComponentSet:
    """Meshes, spaces and assembled operators of the component pool."""

    cfg: ExperimentConfig
    meshes: dict
    spaces: dict
    operators: dict
    interface_blocks: dict


def build_component_set(cfg: ExperimentConfig, meshes: Optional[dict] = None) -> ComponentSet:
    meshes = meshes or build_component_meshes(cfg)
    spaces = {name: TaylorHoodSpace(mesh) for name, mesh in meshes.items()}
    nu = cfg.viscosity
    operators = {name: build_component_operators(space, nu) for name, space in spaces.items()}
    blocks = {
        (a, b, o): assemble_interface_blocks(spaces[a], spaces[b], o, nu)
        for a in spaces
        for b in spaces
        for o in ("H", "V")
    }
    return ComponentSet(cfg, meshes, spaces, operators, blocks)


def random_cells(rng: np.random.Generator, rows: int, cols: int, pool) -> list:
    pool = list(pool)
    picks = rng.integers(0, len(pool), size=(rows, cols))
    return [[pool[picks[r, c]] for c in range(cols)] for r in range(rows)]


def generate_snapshots(cfg: ExperimentConfig, parts: ComponentSet, rng=None):
    """Solve random small arrays and restrict solutions per reference component.

    Non-convergent samples are skipped and logged.  Returns (snapshot sets
    by component, number of skipped samples).
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    sets = {
        name: SnapshotSet(
            name,
            np.zeros((parts.spaces[name].n_u, 0)),
            np.zeros((parts.spaces[name].n_p, 0)),
        )
        for name in cfg.components
    }
    skipped = 0
    for i in range(cfg.train_samples):
        cells = random_cells(rng, cfg.train_rows, cfg.train_cols, cfg.components)
        sample = sample_inflow(rng)
        grid = GridConfig(
            cfg.train_rows, cfg.train_cols, cells, cfg.viscosity, bc_from_sample(sample)
        )
        system = assemble_global(grid, parts.operators, parts.interface_blocks)
        try:
            u, p, report = solve_newton(
                system, tol_rel=cfg.newton_tol, max_iter=cfg.newton_max_iter
            )
        except RuntimeError as exc:
            log.warning("training sample %d failed: %s", i, exc)
            skipped += 1
            continue
        if not report.converged:
            log.warning(
                "training sample %d did not converge (residual %.3e), skipped",
                i,
                report.residual_history[-1],
            )
            skipped += 1
            continue
        for m in range(grid.n_subdomains):
            name = grid.component_name(m)
            sets[name].append(
                u[system.slice_u(m)],
                p[system.slice_p(m)],
                {"sample": i, "cell": m, **sample.as_row()},
            )
    return sets, skipped


@dataclass
class TrainedModel:
    cfg: ExperimentConfig
    parts: ComponentSet
    snapshots: dict
    bases: dict
    reduced: dict
    reduced_interfaces: dict
    eqp_tols: dict = field(default_factory=dict)

    def rom_dimension(self, grid: GridConfig) -> int:
        dims = 0
        for m in range(grid.n_subdomains):
            red = self.reduced[grid.component_name(m)]
            dims += red.r_u + red.r_p
        return dims


def train_bases(cfg: ExperimentConfig, parts: ComponentSet, snapshots: dict, z=None) -> dict:
    z = cfg.z if z is None else z
    return {
        name: build_pod_basis(
            snapshots[name], parts.operators[name], cfg.basis_size, cfg.r_p, z
        )
        for name in cfg.components
    }


def train_model(
    cfg: ExperimentConfig,
    parts: Optional[ComponentSet] = None,
    snapshots: Optional[dict] = None,
    with_eqp: bool = True,
    z: Optional[int] = None,
) -> TrainedModel:
    """Full training pipeline: snapshots, POD + supremizers, projection, tensors, EQP."""
    parts = parts or build_component_set(cfg)
    if snapshots is None:
        t0 = time.perf_counter()
        snapshots, skipped = generate_snapshots(cfg, parts)
        log.info(
            "snapshot generation: %d samples (%d skipped) in %.1fs",
            cfg.train_samples,
            skipped,
            time.perf_counter() - t0,
        )
    bases = train_bases(cfg, parts, snapshots, z=z)
    reduced, riface = project_linear(parts.operators, parts.interface_blocks, bases)
    eqp_tols = {}
    for name in cfg.components:
        red = reduced[name]
        red.tensor = build_advection_tensor(parts.operators[name], bases[name].phi_u)
        if with_eqp:
            eps = cfg.eqp_tol
            if eps is None:
                eps = missing_energy(bases[name].sigma_u, bases[name].R_u)
            manifest = build_manifest(
                parts.operators[name], bases[name].phi_u, snapshots[name]
            )
            red.eqp_rule = train_rule(manifest, parts.operators[name], bases[name].phi_u, eps)
            eqp_tols[name] = eps
            log.info(
                "EQP %s: %d of %d points (eps %.2e, residual %.2e)",
                name,
                red.eqp_rule.n_points,
                manifest.G.shape[1],
                eps,
                red.eqp_rule.residual,
            )
    return TrainedModel(cfg, parts, snapshots, bases, reduced, riface, eqp_tols)


# --- prediction studies -----------------------------------------------------


def _timed(repeats, fn):
    """Median wall time of repeated runs; returns (result of last run, seconds)."""
    times = []
    result = None
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        result = fn()
        times.append(time.perf_counter() - t0)
    return result, float(np.median(times))


def _solve_case(model: TrainedModel, grid: GridConfig, backends, repeats: int):
    """One test case: FOM reference plus a ROM solve per requested backend."""
    cfg = model.cfg
    parts = model.parts
    row = {}
    fom_sys, t_asm = _timed(
        repeats, lambda: assemble_global(grid, parts.operators, parts.interface_blocks)
    )
    (u_f, p_f, rep_f), t_solve = _timed(
        repeats,
        lambda: solve_newton(fom_sys, tol_rel=cfg.newton_tol, max_iter=cfg.newton_max_iter),
    )
    row.update(
        fom_dofs=fom_sys.n_dof,
        fom_converged=rep_f.converged,
        fom_iterations=rep_f.newton_iterations,
        fom_residual=rep_f.residual_history[-1],
        fom_assembly_s=t_asm,
        fom_solve_s=t_solve,
    )
    lifted = {}
    for backend in backends:
        rom_sys, t_rasm = _timed(
            repeats,
            lambda: assemble_global_rom(grid, model.reduced, model.reduced_interfaces, backend),
        )
        (uh, ph, rep_r), t_rsolve = _timed(
            repeats,
            lambda: solve_rom_newton(rom_sys, tol_rel=cfg.newton_tol, max_iter=cfg.newton_max_iter),
        )
        lifted[backend] = lift(rom_sys, uh, ph)
        errs = relative_errors(fom_sys, u_f, p_f, lifted[backend])
        row.update(
            {
                "rom_dim": rom_sys.n_dof,
                f"rom_{backend}_converged": rep_r.converged,
                f"rom_{backend}_iterations": rep_r.newton_iterations,
                f"vel_err_{backend}": errs["velocity_rel_l2"],
                f"pres_err_{backend}": errs["pressure_rel_l2"],
                f"rom_{backend}_assembly_s": t_rasm,
                f"rom_{backend}_solve_s": t_rsolve,
            }
        )
    if len(backends) == 2:
        a, b = (lifted[bk] for bk in backends)
        du2 = dp2 = nu2 = np2 = 0.0
        for m in range(grid.n_subdomains):
            space = parts.spaces[grid.component_name(m)]
            du2 += space.velocity_l2(a.u[a.off_u[m] : a.off_u[m + 1]] - b.u[b.off_u[m] : b.off_u[m + 1]]) ** 2
            nu2 += space.velocity_l2(a.u[a.off_u[m] : a.off_u[m + 1]]) ** 2
            dp2 += space.pressure_l2(a.p[a.off_p[m] : a.off_p[m + 1]] - b.p[b.off_p[m] : b.off_p[m + 1]]) ** 2
            np2 += space.pressure_l2(a.p[a.off_p[m] : a.off_p[m + 1]]) ** 2
        row["backend_vel_diff"] = float(np.sqrt(du2 / max(nu2, 1e-300)))
        row["backend_pres_diff"] = float(np.sqrt(dp2 / max(np2, 1e-300)))
    return row


def _write_csv(path, rows) -> None:
    if not rows:
        raise ValueError("no rows to report")
    fields = list(rows[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, quoting=csv.QUOTE_MINIMAL)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def run_scaling_study(model: TrainedModel, out_dir, backends=(TENSORIAL, EQP)) -> Path:
    """Errors and timings over grid sizes; one row per (size, test case)."""
    cfg = model.cfg
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed + 1)
    rows = []
    for L in cfg.predict_sizes:
        for case in range(cfg.tests_per_size):
            cells = random_cells(rng, L, L, cfg.components)
            sample = sample_inflow(rng)
            grid = GridConfig(L, L, cells, cfg.viscosity, bc_from_sample(sample))
            row = {
                "L": L,
                "case": case,
                "cells": ";".join(c for r in cells for c in r),
                **sample.as_row(),
            }
            row.update(_solve_case(model, grid, backends, cfg.timing_repeats))
            rows.append(row)
            log.info(
                "scaling L=%d case %d: vel err %s",
                L,
                case,
                {b: row.get(f"vel_err_{b}") for b in backends},
            )
    path = out_dir / "results.csv"
    _write_csv(path, rows)
    return path


def run_supremizer_ablation(model: TrainedModel, out_dir, z_values, grid_size=4) -> Path:
    """Re-enrich the trained bases per supremizer count and compare errors."""
    cfg = model.cfg
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    # the test set is fixed across Z so rows are comparable
    rng = np.random.default_rng(cfg.seed + 2)
    cases = []
    for case in range(cfg.tests_per_size):
        cases.append(
            (
                random_cells(rng, grid_size, grid_size, cfg.components),
                sample_inflow(rng),
            )
        )
    for z in z_values:
        bases = train_bases(cfg, model.parts, model.snapshots, z=z)
        reduced, riface = project_linear(
            model.parts.operators, model.parts.interface_blocks, bases
        )
        for name in cfg.components:
            reduced[name].tensor = build_advection_tensor(
                model.parts.operators[name], bases[name].phi_u
            )
        sub = TrainedModel(cfg, model.parts, model.snapshots, bases, reduced, riface)
        for case, (cells, sample) in enumerate(cases):
            grid = GridConfig(
                grid_size, grid_size, cells, cfg.viscosity, bc_from_sample(sample)
            )
            row = {"Z": z, "case": case, **sample.as_row()}
            row.update(_solve_case(sub, grid, (TENSORIAL,), cfg.timing_repeats))
            rows.append(row)
            log.info(
                "ablation Z=%d case %d: vel %.3e pres %.3e",
                z,
                case,
                row["vel_err_tensorial"],
                row["pres_err_tensorial"],
            )
    path = out_dir / "results.csv"
    _write_csv(path, rows)
    return path


def run_backend_comparison(model: TrainedModel, out_dir, r_values, grid_size=4) -> Path:
    """Tensorial vs EQP at several basis sizes on identical test sets.

    Bases are retrained by truncating the stored snapshots at each R.
    """
    cfg = model.cfg
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed + 3)
    cases = []
    for case in range(cfg.tests_per_size):
        cases.append(
            (
                random_cells(rng, grid_size, grid_size, cfg.components),
                sample_inflow(rng),
            )
        )
    rows = []
    for r in r_values:
        sub_cfg = replace(cfg, basis_size=r, pressure_basis_size=r, supremizer_size=r)
        sub = train_model(sub_cfg, parts=model.parts, snapshots=model.snapshots, with_eqp=True)
        for case, (cells, sample) in enumerate(cases):
            grid = GridConfig(
                grid_size, grid_size, cells, cfg.viscosity, bc_from_sample(sample)
            )
            row = {"R": r, "case": case, **sample.as_row()}
            row["eqp_points"] = ";".join(
                str(sub.reduced[name].eqp_rule.n_points) for name in cfg.components
            )
            row.update(_solve_case(sub, grid, (TENSORIAL, EQP), cfg.timing_repeats))
            rows.append(row)
            log.info(
                "backend R=%d case %d: diff %.3e",
                r,
                case,
                row["backend_vel_diff"],
            )
    path = out_dir / "results.csv"
    _write_csv(path, rows)
    return path
