"""Advection-diffusion benchmark data generator.

Finite differences on a structured grid interpreted as a graph: implicit Euler
in time, central second differences for diffusion, first-order upwinding for
advection.  The grid may carry a rectangular hole whose interior nodes are
removed; the hole is snapped to grid cells so node count and connectivity are
identical for every hole position, with the actual position encoded in the
node coordinates through a per-axis piecewise-linear stretch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .data import SignalTable, SnapshotDataset
from .errors import DivergenceError, GeometryError, ValidationError
from .mesh import MeshGraph

HOLE_SIDE = 0.3
MH_RANGE = (0.2, 0.5)


@dataclass
class AdvDiffProblem:
    """Strong form: du/dt - div(kappa grad u) + beta . grad u = f.

    Dirichlet data on the outer boundary, homogeneous Neumann elsewhere.
    beta(t, mu) -> (2,); forcing(x, t, mu) -> per-node values; dirichlet(x, t)
    and initial(x) evaluate on (N, 2) coordinate arrays.
    """

    kappa: float
    beta: callable
    forcing: callable
    dirichlet: callable
    initial: callable
    T: float
    dt: float

    def __post_init__(self):
        if self.dt <= 0 or self.T <= 0 or self.kappa < 0:
            raise ValidationError("need dt > 0, T > 0, kappa >= 0")


@dataclass
class GeometrySpec:
    kind: str                      # "unit_square" or "square_with_hole"
    resolution: int
    hole_origin: tuple = None      # (mu1, mu2) for square_with_hole
    hole_side: float = HOLE_SIDE


@dataclass
class Geometry:
    """Structured-grid mesh with boundary tags and per-node stencil data."""

    graph: MeshGraph
    dirichlet_mask: np.ndarray     # (N,) bool, outer-boundary nodes
    stencil: np.ndarray            # (N, 4) neighbor index per direction, -1 if absent
    spacing: np.ndarray            # (N, 4) distance to each stencil neighbor


_DIRS = ((-1, 0), (1, 0), (0, -1), (0, 1))   # -x, +x, -y, +y


def _axis_coords(r, lo_idx, hi_idx, lo_val, hi_val):
    """Piecewise-linear stretch of the uniform axis through two breakpoints."""
    ref = np.linspace(0.0, 1.0, r)
    if lo_idx is None:
        return ref
    xp = [0.0, ref[lo_idx], ref[hi_idx], 1.0]
    fp = [0.0, lo_val, hi_val, 1.0]
    return np.interp(ref, xp, fp)


def build_geometry(spec):
    """Structured grid with optional snapped hole, tagged for boundary conditions."""
    r = spec.resolution
    if r < 3:
        raise GeometryError("resolution must be at least 3")
    if spec.kind == "unit_square":
        keep = np.ones((r, r), dtype=bool)
        xs = ys = np.linspace(0.0, 1.0, r)
        hole_range = None
    elif spec.kind == "square_with_hole":
        mu1, mu2 = spec.hole_origin
        lo, hi = MH_RANGE
        if not (lo <= mu1 <= hi and lo <= mu2 <= hi):
            raise GeometryError(
                f"hole origin {spec.hole_origin} outside admissible range [{lo}, {hi}]^2"
            )
        ncells = max(1, round(spec.hole_side * (r - 1)))
        i0 = (r - 1 - ncells) // 2        # reference cell position, fixed across mu
        if i0 < 1 or i0 + ncells > r - 2:
            raise GeometryError("resolution too coarse for the hole size")
        keep = np.ones((r, r), dtype=bool)
        keep[i0 + 1 : i0 + ncells, i0 + 1 : i0 + ncells] = False
        xs = _axis_coords(r, i0, i0 + ncells, mu1, mu1 + spec.hole_side)
        ys = _axis_coords(r, i0, i0 + ncells, mu2, mu2 + spec.hole_side)
        hole_range = (i0, i0 + ncells)
    else:
        raise GeometryError(f"unknown geometry kind {spec.kind!r}")

    index = -np.ones((r, r), dtype=np.int64)
    nodes = np.argwhere(keep)
    for n, (i, j) in enumerate(nodes):
        index[i, j] = n
    n_nodes = len(nodes)
    coords = np.stack([xs[nodes[:, 0]], ys[nodes[:, 1]]], axis=1)

    stencil = -np.ones((n_nodes, 4), dtype=np.int64)
    spacing = np.zeros((n_nodes, 4))
    edges = []
    for n, (i, j) in enumerate(nodes):
        for d, (di, dj) in enumerate(_DIRS):
            ii, jj = i + di, j + dj
            if 0 <= ii < r and 0 <= jj < r and keep[ii, jj]:
                m = index[ii, jj]
                stencil[n, d] = m
                spacing[n, d] = abs(xs[ii] - xs[i]) if dj == 0 else abs(ys[jj] - ys[j])
                if m > n:
                    edges.append((n, m))
    graph = MeshGraph(coords=coords, edges=np.asarray(edges, dtype=np.int64))

    dirichlet = np.zeros(n_nodes, dtype=bool)
    for n, (i, j) in enumerate(nodes):
        if i in (0, r - 1) or j in (0, r - 1):
            dirichlet[n] = True
        # Hole-boundary nodes stay Neumann.
    return Geometry(graph=graph, dirichlet_mask=dirichlet, stencil=stencil, spacing=spacing)


def assemble_step_operator(problem, geom, t, mu):
    """Sparse system A u^{k+1} = u^k + dt f^{k+1} for one implicit-Euler step.

    A = I + dt (-kappa Lap_h + beta . grad_h) with Dirichlet rows replaced by
    identity.  Missing stencil neighbors are treated as homogeneous Neumann:
    ghost reflection for diffusion, zero derivative for upwinded advection.
    """
    n = geom.graph.num_nodes
    beta = np.asarray(problem.beta(t, mu), dtype=np.float64)
    rows, cols, vals = [], [], []

    def add(i, j, v):
        rows.append(i)
        cols.append(j)
        vals.append(v)

    for i in range(n):
        if geom.dirichlet_mask[i]:
            add(i, i, 1.0)
            continue
        diag = 1.0
        for axis in range(2):
            d_lo, d_hi = 2 * axis, 2 * axis + 1
            nb_lo, nb_hi = geom.stencil[i, d_lo], geom.stencil[i, d_hi]
            h_lo, h_hi = geom.spacing[i, d_lo], geom.spacing[i, d_hi]
            # diffusion
            if problem.kappa > 0:
                k = problem.kappa * problem.dt
                if nb_lo >= 0 and nb_hi >= 0:
                    denom = h_lo * h_hi * (h_lo + h_hi)
                    add(i, nb_lo, -k * 2 * h_hi / denom)
                    add(i, nb_hi, -k * 2 * h_lo / denom)
                    diag += k * 2 * (h_lo + h_hi) / denom
                elif nb_lo >= 0:
                    add(i, nb_lo, -k * 2 / h_lo**2)
                    diag += k * 2 / h_lo**2
                elif nb_hi >= 0:
                    add(i, nb_hi, -k * 2 / h_hi**2)
                    diag += k * 2 / h_hi**2
            # advection, first-order upwind
            b = beta[axis]
            if b > 0 and nb_lo >= 0:
                add(i, nb_lo, -problem.dt * b / h_lo)
                diag += problem.dt * b / h_lo
            elif b < 0 and nb_hi >= 0:
                add(i, nb_hi, problem.dt * b / h_hi)
                diag -= problem.dt * b / h_hi
        add(i, i, diag)
    a = sp.csc_matrix((vals, (rows, cols)), shape=(n, n))

    coords = geom.graph.coords
    u_dir = problem.dirichlet(coords, t)

    def rhs(u_prev):
        f = problem.forcing(coords, t, mu)
        out = u_prev + problem.dt * np.asarray(f, dtype=np.float64)
        out[geom.dirichlet_mask] = u_dir[geom.dirichlet_mask]
        return out

    return a, rhs


def solve_trajectory(problem, geom, mu):
    """Implicit-Euler time series u(t_k) for one parameter, shape (N_t+1, N_h, 1)."""
    n_t = int(round(problem.T / problem.dt))
    coords = geom.graph.coords
    u = np.asarray(problem.initial(coords), dtype=np.float64)
    u[geom.dirichlet_mask] = problem.dirichlet(coords, 0.0)[geom.dirichlet_mask]
    snaps = [u.copy()]
    for k in range(n_t):
        t_next = (k + 1) * problem.dt
        a, rhs = assemble_step_operator(problem, geom, t_next, mu)
        u = splu(a).solve(rhs(u))
        if not np.all(np.isfinite(u)):
            raise DivergenceError(f"solver diverged at step {k + 1}")
        snaps.append(u.copy())
    return np.stack(snaps)[:, :, None]


def _paraboloid(x):
    return (x[:, 0] - 1.0) ** 2 + (x[:, 1] - 1.0) ** 2


def benchmark_problem(name, dt=2e-2):
    """SA/MH advection-diffusion setup: kappa = 0.1, T = 2, zero forcing."""
    name = name.lower()
    if name == "sa":
        beta = lambda t, mu: np.array([mu[0] * (1.0 - t), mu[1] * (1.0 - t)])
    elif name == "mh":
        beta = lambda t, mu: np.array([1.0 - t, 1.0 - t])
    else:
        raise ValidationError(f"unknown benchmark {name!r}")
    return AdvDiffProblem(
        kappa=0.1,
        beta=beta,
        forcing=lambda x, t, mu: np.zeros(len(x)),
        dirichlet=lambda x, t: _paraboloid(x),
        initial=_paraboloid,
        T=2.0,
        dt=dt,
    )


def parameter_grid(name, k):
    """K x K equispaced parameter grid for the named benchmark."""
    name = name.lower()
    if name == "sa":
        lo, hi = -1.0, 1.0
    elif name == "mh":
        lo, hi = MH_RANGE
    else:
        raise ValidationError(f"unknown benchmark {name!r}")
    axis = np.linspace(lo, hi, k)
    return np.array([(a, b) for a in axis for b in axis])


def generate_benchmark(name, grid_k, resolution, dt=2e-2):
    """Full benchmark dataset: one implicit-Euler trajectory per grid point.

    For MH the mesh connectivity is shared across parameters; the canonical
    mesh stored with the dataset uses the grid-center hole position.
    """
    name = name.lower()
    problem = benchmark_problem(name, dt=dt)
    mus = parameter_grid(name, grid_k)
    n_t = int(round(problem.T / problem.dt))
    times = np.arange(n_t + 1) * problem.dt

    if name == "sa":
        geoms = [build_geometry(GeometrySpec("unit_square", resolution))] * len(mus)
        canonical = geoms[0]
    else:
        geoms = [
            build_geometry(GeometrySpec("square_with_hole", resolution, hole_origin=tuple(mu)))
            for mu in mus
        ]
        center = tuple(np.mean(MH_RANGE) * np.ones(2))
        canonical = build_geometry(GeometrySpec("square_with_hole", resolution, hole_origin=center))

    fields = []
    signals = []
    for i, (mu, geom) in enumerate(zip(mus, geoms)):
        fields.append(solve_trajectory(problem, geom, mu))
        signals.append(SignalTable(i, times, np.tile(mu, (n_t + 1, 1))))
    return SnapshotDataset(mesh=canonical.graph, signals=signals, fields_u=np.stack(fields))
