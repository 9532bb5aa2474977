"""Command-line front end.

Commands: ``solve`` (one benchmark run with trace/CSV artifacts),
``converge`` (micro or macro refinement study), ``speedup`` (nested vs
alternating comparison), ``genmicro`` (phase-grid generation) and ``oracle``
(single-scale reference on a resolved microstructure).

Configuration is a flat key=value text file with dot-namespaced keys,
overridable per run with ``--set key=value``.  All artifacts are CSV or JSON;
outputs are bit-reproducible for a fixed config and seed except wall-clock
columns.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import material as mat
from .errors import FehmmError
from .mesh import (QUAD4, TRI3, PhaseGrid, generate_structured,
                   mesh_from_phase_grid, read_phase_grid, refine_uniform,
                   write_phase_grid)
from .micro_rve import COUPLINGS, PERIODIC, RveProblem
from .two_scale import (ALTERNATING, NESTED, LoadSpec, MacroProblem,
                        SolverConfig, TwoScaleSolver)
from . import verify

_DEFAULTS = {
    "problem.length": "5000",
    "problem.height": "1000",
    "problem.thickness": "100",
    "macro.nx": "5",
    "macro.ny": "1",
    "macro.kind": QUAD4,
    "micro.source": "checkerboard:16",
    "micro.kind": QUAD4,
    "micro.epsilon": "110",
    "micro.delta": "",
    "micro.refine": "0",
    "material.law": mat.NEO_HOOKEAN,
    "material.kinematics": mat.FINITE,
    "material.E1": "100000",
    "material.nu1": "0.2",
    "material.E2": "40000",
    "material.nu2": "0.2",
    "load.mode": "force",
    "load.value": "200",
    "solver.scheme": NESTED,
    "solver.n_load_steps": "4",
    "solver.macro_tol": "1e-8",
    "solver.micro_tol": "1e-10",
    "solver.max_macro_iter": "30",
    "solver.max_micro_iter": "30",
    "solver.coupling": PERIODIC,
    "converge.levels": "4",
    "converge.ref_extra": "2",
    "oracle.cells_x": "8",
    "oracle.cells_y": "4",
    "snapshot.x": "",
    "snapshot.y": "",
}


class ConfigError(FehmmError):
    """Invalid or inconsistent run configuration."""


def generate_microstructure(name: str, resolution: int, seed: int = 0) -> PhaseGrid:
    """Built-in two-phase pixel patterns.

    checkerboard, laminate-x (columns), laminate-y (rows), inclusion
    (centered square of phase 2), wavy-laminate (sinusoidally shifted
    stripes), blob (seeded thresholded noise), homogeneous.
    """
    n = int(resolution)
    if n < 1:
        raise ConfigError("resolution must be positive")
    ix, iy = np.meshgrid(np.arange(n), np.arange(n))
    if name == "checkerboard":
        cells = 1 + (ix + iy) % 2
    elif name == "laminate-x":
        cells = 1 + ix % 2
    elif name == "laminate-y":
        cells = 1 + iy % 2
    elif name == "inclusion":
        lo, hi = n // 4, n - n // 4
        inside = (ix >= lo) & (ix < hi) & (iy >= lo) & (iy < hi)
        cells = np.where(inside, 2, 1)
    elif name == "wavy-laminate":
        shift = np.sin(2.0 * np.pi * (iy + 0.5) / n) * n / 8.0
        cells = 1 + (((ix + shift) // (n // 4 if n >= 8 else 1)) % 2).astype(int)
    elif name == "blob":
        try:
            from scipy.ndimage import gaussian_filter
        except ImportError as err:  # pragma: no cover
            raise ConfigError("blob generator needs scipy.ndimage") from err
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal((n, n))
        smooth = gaussian_filter(noise, sigma=max(1.0, n / 12.0), mode="wrap")
        cells = np.where(smooth < np.median(smooth), 1, 2)
    elif name == "homogeneous":
        cells = np.ones((n, n), dtype=int)
    else:
        raise ConfigError(f"unknown microstructure generator {name!r}")
    return PhaseGrid(n, n, np.asarray(cells, dtype=np.int64).ravel().copy())


def _load_config(path, overrides):
    cfg = dict(_DEFAULTS)
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value")
                k, v = (s.strip() for s in line.split("=", 1))
                if k not in _DEFAULTS:
                    raise ConfigError(f"{path}:{lineno}: unknown key {k!r}")
                cfg[k] = v
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        if k not in _DEFAULTS:
            raise ConfigError(f"unknown key {k!r}")
        cfg[k] = v
    return cfg


@dataclass
class RunConfig:
    """Fully validated run description built from the key=value config."""

    length: float
    height: float
    thickness: float
    macro_nx: int
    macro_ny: int
    macro_kind: str
    micro_source: str
    micro_kind: str
    epsilon: float
    delta: float
    micro_refine: int
    material: mat.Material
    load: LoadSpec
    solver: SolverConfig
    coupling: str
    converge_levels: int
    converge_ref_extra: int
    oracle_cells: tuple
    snapshot: tuple | None
    seed: int
    threads: int

    @property
    def tiles(self) -> int:
        return int(round(self.delta / self.epsilon))


def _parse_run_config(cfg, seed, threads) -> RunConfig:
    def fget(key):
        try:
            return float(cfg[key])
        except ValueError as err:
            raise ConfigError(f"{key} must be a number, got {cfg[key]!r}") from err

    def iget(key):
        try:
            return int(cfg[key])
        except ValueError as err:
            raise ConfigError(f"{key} must be an integer, got {cfg[key]!r}") from err

    length, height = fget("problem.length"), fget("problem.height")
    if length <= 0 or height <= 0:
        raise ConfigError("problem dimensions must be positive")
    for key in ("macro.kind", "micro.kind"):
        if cfg[key] not in (QUAD4, TRI3):
            raise ConfigError(f"{key} must be quad4 or tri3")
    epsilon = fget("micro.epsilon")
    delta = fget("micro.delta") if cfg["micro.delta"] else epsilon
    coupling = cfg["solver.coupling"]
    if coupling not in COUPLINGS:
        raise ConfigError(f"unknown coupling {coupling!r}")
    ratio = delta / epsilon
    if ratio < 1.0 - 1e-9 or (coupling == PERIODIC
                              and abs(ratio - round(ratio)) > 1e-9):
        raise ConfigError("delta/epsilon must be a positive integer for periodic coupling")
    try:
        material = mat.Material(
            law=cfg["material.law"], kinematics=cfg["material.kinematics"],
            phases={1: mat.lame_from_engineering(fget("material.E1"), fget("material.nu1")),
                    2: mat.lame_from_engineering(fget("material.E2"), fget("material.nu2"))})
    except ValueError as err:
        raise ConfigError(str(err)) from err
    if cfg["load.mode"] not in ("force", "displacement"):
        raise ConfigError("load.mode must be force or displacement")
    load = LoadSpec(mode=cfg["load.mode"], value=fget("load.value"))
    try:
        solver = SolverConfig(
            scheme=cfg["solver.scheme"], n_load_steps=iget("solver.n_load_steps"),
            macro_tol=fget("solver.macro_tol"), micro_tol=fget("solver.micro_tol"),
            max_macro_iter=iget("solver.max_macro_iter"),
            max_micro_iter=iget("solver.max_micro_iter"), threads=threads)
    except ValueError as err:
        raise ConfigError(str(err)) from err
    snapshot = None
    if cfg["snapshot.x"] or cfg["snapshot.y"]:
        if not (cfg["snapshot.x"] and cfg["snapshot.y"]):
            raise ConfigError("snapshot needs both snapshot.x and snapshot.y")
        snapshot = (fget("snapshot.x"), fget("snapshot.y"))
    return RunConfig(
        length=length, height=height, thickness=fget("problem.thickness"),
        macro_nx=iget("macro.nx"), macro_ny=iget("macro.ny"),
        macro_kind=cfg["macro.kind"], micro_source=cfg["micro.source"],
        micro_kind=cfg["micro.kind"], epsilon=epsilon, delta=delta,
        micro_refine=iget("micro.refine"), material=material, load=load,
        solver=solver, coupling=coupling,
        converge_levels=iget("converge.levels"),
        converge_ref_extra=iget("converge.ref_extra"),
        oracle_cells=(iget("oracle.cells_x"), iget("oracle.cells_y")),
        snapshot=snapshot, seed=seed, threads=threads)


def _phase_grid_from_source(rc: RunConfig) -> PhaseGrid:
    src = rc.micro_source
    if src.startswith("file:"):
        path = src[5:]
        if not os.path.exists(path):
            raise ConfigError(f"phase-grid file not found: {path}")
        grid = read_phase_grid(path)
    else:
        name, _, arg = src.partition(":")
        grid = generate_microstructure(name, int(arg) if arg else 16, seed=rc.seed)
    if rc.tiles > 1:
        grid = grid.tile(rc.tiles)
    return grid


def _build_problem(rc: RunConfig):
    macro = generate_structured(rc.length, rc.height, rc.macro_nx, rc.macro_ny,
                                rc.macro_kind)
    grid = _phase_grid_from_source(rc)
    micro = mesh_from_phase_grid(grid, rc.delta, rc.micro_kind)
    for _ in range(rc.micro_refine):
        micro = refine_uniform(micro)
    rve = RveProblem(micro, rc.material, coupling=rc.coupling)
    return MacroProblem(mesh=macro, material=rc.material, rve=rve, load=rc.load), grid


def _fmt(x) -> str:
    return f"{x:.12g}"


def _write_csv(path, header, rows):
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) if isinstance(v, float) else str(v)
                             for v in row) + "\n")


def _trace_rows(trace):
    rows = []
    for st in trace.steps:
        for k, rel in enumerate(st.residuals):
            t = st.iter_times[k] if k < len(st.iter_times) else 0.0
            rows.append((trace.scheme, st.step, k + 1, float(rel),
                         st.micro_iters[k] if k < len(st.micro_iters) else 0,
                         float(t)))
    return rows


def _snapshot_rows(solver, state, x, y):
    """Per-micro-element strain and stress at the macro qp nearest (x, y)."""
    mesh = solver.problem.mesh
    coords = mesh.nodes[mesh.elems]
    qp_xy = np.einsum("qn,enk->eqk", solver.macro.kernel.N, coords)
    d2 = (qp_xy[..., 0] - x) ** 2 + (qp_xy[..., 1] - y) ** 2
    e, q = np.unravel_index(np.argmin(d2), d2.shape)
    idx = solver.qp_index.index((int(e), int(q)))
    rstate = state.rves[idx]
    rve = solver.problem.rve
    F2, _, Sv, S33, _, _ = rve.assembler.qp_fields(rstate.D)
    if solver.problem.material.kinematics == mat.SMALL:
        H = rve.assembler.disp_gradients(rstate.D)
        Exx, Eyy = H[..., 0, 0], H[..., 1, 1]
        Exy2 = H[..., 0, 1] + H[..., 1, 0]
    else:
        Exx = 0.5 * (F2[..., 0, 0] ** 2 + F2[..., 1, 0] ** 2 - 1.0)
        Eyy = 0.5 * (F2[..., 0, 1] ** 2 + F2[..., 1, 1] ** 2 - 1.0)
        Exy2 = F2[..., 0, 0] * F2[..., 0, 1] + F2[..., 1, 0] * F2[..., 1, 1]
    s11, s22, s12 = Sv[..., 0], Sv[..., 1], Sv[..., 2]
    vm = np.sqrt(s11 ** 2 + s22 ** 2 + S33 ** 2 - s11 * s22 - s22 * S33
                 - S33 * s11 + 3.0 * s12 ** 2)
    cent = rve.mesh.nodes[rve.mesh.elems].mean(axis=1)
    rows = []
    for el in range(rve.mesh.n_elems):
        rows.append((float(cent[el, 0]), float(cent[el, 1]),
                     float(Exx[el].mean()), float(Eyy[el].mean()),
                     float(Exy2[el].mean()), float(vm[el].mean())))
    return (float(qp_xy[e, q, 0]), float(qp_xy[e, q, 1])), rows


# -- commands -------------------------------------------------------------------


def cmd_solve(args) -> int:
    rc = _parse_run_config(_load_config(args.config, args.set), args.seed, args.threads)
    problem, grid = _build_problem(rc)
    os.makedirs(args.out, exist_ok=True)
    solver = TwoScaleSolver(problem, rc.solver)
    state, trace = solver.run()
    _write_csv(os.path.join(args.out, "trace.csv"),
               ["scheme", "load_step", "macro_iter", "macro_residual",
                "micro_iters_total", "t_iter_s"], _trace_rows(trace))
    _write_csv(os.path.join(args.out, "umax.csv"),
               ["step", "load_factor", "u_max"],
               [(s.step, float(s.load_factor), float(s.u_max)) for s in trace.steps])
    summary = {
        "scheme": trace.scheme,
        "u_max": trace.steps[-1].u_max,
        "total_time_s": trace.total_time,
        "macro_solves": [s.n_macro_solves for s in trace.steps],
        "micro_iters": [sum(s.micro_iters) for s in trace.steps],
        "volume_fractions": grid.volume_fractions(),
        "converged": True,
    }
    if rc.snapshot is not None:
        qp_xy, rows = _snapshot_rows(solver, state, *rc.snapshot)
        _write_csv(os.path.join(args.out, "snapshot.csv"),
                   ["x_mm", "y_mm", "E_xx", "E_yy", "two_E_xy", "von_mises"], rows)
        summary["snapshot_qp"] = {"x": qp_xy[0], "y": qp_xy[1]}
        print(f"snapshot at macro qp ({qp_xy[0]:.2f}, {qp_xy[1]:.2f})")
    with open(os.path.join(args.out, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    print(f"u_max = {trace.steps[-1].u_max:.6g} mm in {trace.total_time:.2f} s")
    return 0


def cmd_converge(args) -> int:
    rc = _parse_run_config(_load_config(args.config, args.set), args.seed, args.threads)
    if rc.converge_levels < 3:
        raise ConfigError(">=3 levels required")
    macro = generate_structured(rc.length, rc.height, rc.macro_nx, rc.macro_ny,
                                rc.macro_kind)
    cfg = SolverConfig(scheme=NESTED, n_load_steps=rc.solver.n_load_steps,
                       macro_tol=rc.solver.macro_tol, micro_tol=rc.solver.micro_tol,
                       max_macro_iter=rc.solver.max_macro_iter,
                       max_micro_iter=rc.solver.max_micro_iter, threads=rc.threads)
    grid = _phase_grid_from_source(rc)
    if args.axis == verify.MICRO_AXIS:
        study = verify.micro_convergence_study(
            macro, grid, rc.delta, rc.material, rc.load,
            n_levels=rc.converge_levels, ref_extra=rc.converge_ref_extra,
            config=cfg, coupling=rc.coupling, micro_kind=rc.micro_kind)
        H = rc.length / rc.macro_nx
        rows = [(i, lv.param, H, lv.l2, lv.h1, lv.energy)
                for i, lv in enumerate(study.levels)]
    else:
        micro = mesh_from_phase_grid(grid, rc.delta, rc.micro_kind)
        for _ in range(rc.micro_refine):
            micro = refine_uniform(micro)
        study = verify.macro_convergence_study(
            macro, micro, rc.material, rc.load, n_levels=rc.converge_levels,
            ref_extra=rc.converge_ref_extra, config=cfg, coupling=rc.coupling)
        h = rc.delta / grid.nx
        rows = [(i, h, lv.param, lv.l2, lv.h1, lv.energy)
                for i, lv in enumerate(study.levels)]
    os.makedirs(args.out, exist_ok=True)
    _write_csv(os.path.join(args.out, "convergence.csv"),
               ["level", "h", "H", "l2", "h1", "energy"], rows)
    summary = {"axis": study.axis, "slopes": study.slopes, "r2": study.r2,
               "reference": study.reference}
    with open(os.path.join(args.out, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    print("slopes:", {k: round(v, 3) for k, v in study.slopes.items()})
    return 0


def cmd_speedup(args) -> int:
    rc = _parse_run_config(_load_config(args.config, args.set), args.seed, args.threads)
    problem, _ = _build_problem(rc)
    os.makedirs(args.out, exist_ok=True)
    variants = [rc.solver.n_load_steps]
    if args.loadsteps_variants:
        variants = sorted({rc.solver.n_load_steps, 1}, reverse=True)
    rows = []
    summary = {"variants": {}}
    status = 0
    for n_ls in variants:
        traces = {}
        for scheme in (NESTED, ALTERNATING):
            cfg = SolverConfig(scheme=scheme, n_load_steps=n_ls,
                               macro_tol=rc.solver.macro_tol,
                               micro_tol=rc.solver.micro_tol,
                               max_macro_iter=rc.solver.max_macro_iter,
                               max_micro_iter=rc.solver.max_micro_iter,
                               threads=rc.threads)
            _, traces[scheme] = TwoScaleSolver(problem, cfg).run()
        rep = verify.speedup_report(traces[NESTED], traces[ALTERNATING])
        for tr in (traces[NESTED], traces[ALTERNATING]):
            for st in tr.steps:
                t_first = st.iter_times[0] if st.iter_times else 0.0
                rows.append((tr.scheme, n_ls, st.step, st.n_macro_solves,
                             float(t_first), float(st.u_max), float(st.step_time)))
        summary["variants"][str(n_ls)] = {
            "factor": rep.factor, "u_max_agree": rep.u_max_agree,
            "max_extra_iterations": rep.max_iter_delta,
            "total_nested_s": rep.total_nested,
            "total_alternating_s": rep.total_alternating,
        }
        if not rep.u_max_agree:
            status = 1
        print(f"N_LS={n_ls}: speedup factor {rep.factor:.3f} "
              f"(u_max agree: {rep.u_max_agree})")
    _write_csv(os.path.join(args.out, "speedup.csv"),
               ["scheme", "n_load_steps", "step", "N_ite_mac", "t_ite_mac_s",
                "u_max", "t_LS_s"], rows)
    with open(os.path.join(args.out, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    return status


def cmd_genmicro(args) -> int:
    grid = generate_microstructure(args.name, args.resolution, seed=args.seed)
    out = args.out or f"{args.name}-{args.resolution}.grid"
    write_phase_grid(out, grid)
    fr = grid.volume_fractions()
    print(f"{out}: {grid.nx}x{grid.ny}, phase fractions "
          f"1: {fr[1]:.4f}, 2: {fr[2]:.4f}")
    return 0


def cmd_oracle(args) -> int:
    rc = _parse_run_config(_load_config(args.config, args.set), args.seed, args.threads)
    grid = _phase_grid_from_source(rc)
    cx, cy = rc.oracle_cells
    mesh = verify.resolved_mesh(grid, rc.epsilon, cx, cy, rc.micro_kind)
    d, hist = verify.single_scale_oracle(mesh, rc.material, rc.load,
                                         n_load_steps=rc.solver.n_load_steps,
                                         tol=rc.solver.macro_tol)
    os.makedirs(args.out, exist_ok=True)
    cache = verify.ReferenceCache(args.out)
    key = cache.key(f"oracle {rc.micro_source} {cx}x{cy} {rc.material.law} "
                    f"{rc.load.mode}:{rc.load.value}")
    path = cache.save(key, d)
    umax = float(np.linalg.norm(d.reshape(-1, 2), axis=1).max())
    with open(os.path.join(args.out, "summary.json"), "w") as f:
        json.dump({"u_max": umax, "ndof": len(d), "dump": os.path.basename(path)},
                  f, indent=2, sort_keys=True)
    print(f"oracle u_max = {umax:.6g} mm, field dumped to {path}")
    return 0


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fehmm",
                                 description="Two-scale FE homogenization solver")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int,
                       default=int(os.environ.get("HMM_THREADS", "1")))

    p = sub.add_parser("solve", help="run one two-scale benchmark")
    common(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("converge", help="refinement convergence study")
    common(p)
    p.add_argument("--axis", choices=[verify.MICRO_AXIS, verify.MACRO_AXIS],
                   required=True)
    p.set_defaults(func=cmd_converge)

    p = sub.add_parser("speedup", help="nested vs alternating comparison")
    common(p)
    p.add_argument("--loadsteps-variants", action="store_true",
                   help="also run the single-load-step variant")
    p.set_defaults(func=cmd_speedup)

    p = sub.add_parser("genmicro", help="generate a phase-grid file")
    p.add_argument("name")
    p.add_argument("resolution", type=int)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_genmicro)

    p = sub.add_parser("oracle", help="single-scale resolved reference")
    common(p)
    p.set_defaults(func=cmd_oracle)
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except FehmmError as err:
        print(f"solver failure: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
