"""Evaluation metrics and bifurcation diagnostics, plus plot-ready CSV export."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


@dataclass
class EvalReport:
    """Per-query relative errors with (sim, time) labels and their aggregates."""

    sim_ids: np.ndarray
    times: np.ndarray
    eps_rel: np.ndarray
    eps_max: float
    eps_mean: float
    nrmse: float = None
    error_fields: np.ndarray = None     # (Q, N_h, d_u), optional


@dataclass
class BifurcationReport:
    """QoI value per parameter, sorted by mu, with an optional critical point."""

    mus: np.ndarray
    qois: np.ndarray
    mu_star: float = None
    threshold: float = None


def relative_error(u_h, u_sim):
    """Relative error field and its scalar norm for one snapshot.

    e_rel = (u_h - u_sim) / ||u_h||, eps_rel = ||e_rel||, with the Frobenius
    norm over all node-channel entries.
    """
    u_h = np.asarray(u_h, dtype=np.float64)
    u_sim = np.asarray(u_sim, dtype=np.float64)
    if u_h.shape != u_sim.shape:
        raise ValidationError("field shapes disagree")
    ref = np.linalg.norm(u_h)
    if ref == 0.0:
        raise ValidationError("reference snapshot has zero norm")
    e_rel = (u_h - u_sim) / ref
    return e_rel, float(np.linalg.norm(e_rel))


def aggregate_errors(eps_values):
    """(max, mean) of per-query relative errors."""
    eps_values = np.asarray(eps_values, dtype=np.float64)
    if eps_values.size == 0:
        raise ValidationError("no error values to aggregate")
    return float(eps_values.max()), float(eps_values.mean())


def nrmse(u_h_set, u_sim_set, u_ref):
    """Root-mean-square error over queries, nodes and channels, scaled by 1/u_ref."""
    if u_ref <= 0:
        raise ValidationError("u_ref must be positive")
    u_h_set = np.asarray(u_h_set, dtype=np.float64)
    u_sim_set = np.asarray(u_sim_set, dtype=np.float64)
    if u_h_set.shape != u_sim_set.shape:
        raise ValidationError("field shapes disagree")
    return float(np.sqrt(np.mean((u_h_set - u_sim_set) ** 2)) / u_ref)


def evaluate_fields(sim_ids, times, u_h_set, u_sim_set, u_ref=None, keep_fields=False):
    """Per-snapshot relative errors and aggregates for a batch of queries."""
    fields = []
    eps = []
    for u_h, u_sim in zip(u_h_set, u_sim_set):
        e_rel, e = relative_error(u_h, u_sim)
        eps.append(e)
        if keep_fields:
            fields.append(e_rel)
    eps = np.asarray(eps)
    eps_max, eps_mean = aggregate_errors(eps)
    score = nrmse(u_h_set, u_sim_set, u_ref) if u_ref is not None else None
    return EvalReport(
        sim_ids=np.asarray(sim_ids), times=np.asarray(times, dtype=np.float64),
        eps_rel=eps, eps_max=eps_max, eps_mean=eps_mean, nrmse=score,
        error_fields=np.stack(fields) if fields else None,
    )


def amplitude(trajectory, dim):
    """Range max - min of one latent component over the trajectory's time grid."""
    states = trajectory.states
    if not 0 <= dim < states.shape[1]:
        raise ValidationError(f"latent dimension {dim} out of range")
    comp = states[:, dim]
    return float(comp.max() - comp.min())


def estimate_critical_parameter(mus, amplitudes, rel_threshold=0.05):
    """Largest mu whose amplitude exceeds the threshold, refined by inverse
    linear interpolation against its first sub-threshold neighbor.

    The threshold is rel_threshold times the maximum amplitude.  Returns
    (mu_star, threshold), or (None, threshold) when no crossing exists (flat
    or everywhere-active diagrams).
    """
    mus = np.asarray(mus, dtype=np.float64)
    amps = np.asarray(amplitudes, dtype=np.float64)
    order = np.argsort(mus)
    mus, amps = mus[order], amps[order]
    a_max = amps.max()
    if a_max <= 0:
        return None, 0.0
    thr = rel_threshold * a_max
    above = amps > thr
    if above.all() or not above.any():
        return None, thr
    # last index still above threshold, scanning in increasing mu
    idx = np.where(above)[0][-1]
    if idx == len(mus) - 1:
        return None, thr
    m0, m1 = mus[idx], mus[idx + 1]
    a0, a1 = amps[idx], amps[idx + 1]
    mu_star = m0 + (a0 - thr) / (a0 - a1) * (m1 - m0)
    return float(mu_star), thr


def bifurcation_diagram(mus, qois, estimate_mu_star=True, rel_threshold=0.05):
    """Diagram table sorted by mu, with an optional critical-point estimate.

    qois are the diagram ordinates (latent amplitudes or field-norm QoI values);
    the critical point is estimated by amplitude thresholding.
    """
    mus = np.asarray(mus, dtype=np.float64)
    qois = np.asarray(qois, dtype=np.float64)
    if mus.shape != qois.shape:
        raise ValidationError("parameter and QoI lists disagree in length")
    order = np.argsort(mus)
    mus, qois = mus[order], qois[order]
    mu_star, thr = (None, None)
    if estimate_mu_star:
        mu_star, thr = estimate_critical_parameter(mus, qois, rel_threshold)
    return BifurcationReport(mus=mus, qois=qois, mu_star=mu_star, threshold=thr)


# --- CSV export -------------------------------------------------------------

def _write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def export_error_curves(report, path):
    """Schema: sim_id,t,eps_rel — one row per evaluated snapshot."""
    rows = [
        (int(i), repr(float(t)), repr(float(e)))
        for i, t, e in zip(report.sim_ids, report.times, report.eps_rel)
    ]
    _write_rows(path, ["sim_id", "t", "eps_rel"], rows)


def export_latent_trajectories(trajectories, sim_ids, path):
    """Schema: sim_id,t,s_1..s_n — one row per recorded latent state."""
    n = trajectories[0].states.shape[1] if trajectories else 0
    header = ["sim_id", "t"] + [f"s_{j + 1}" for j in range(n)]
    rows = []
    for sid, traj in zip(sim_ids, trajectories):
        for t, s in zip(traj.times, traj.states):
            rows.append([int(sid), repr(float(t))] + [repr(float(v)) for v in s])
    _write_rows(path, header, rows)


def export_diagram(report, path):
    """Schema: mu,qoi."""
    rows = [(repr(float(m)), repr(float(q))) for m, q in zip(report.mus, report.qois)]
    _write_rows(path, ["mu", "qoi"], rows)


def export_phase_portrait(trajectories, sim_ids, dim_i, dim_j, path):
    """Schema: sim_id,t,s_i,s_j — the first row of each trajectory is the
    initial condition (marked with a triangle when rendered)."""
    rows = []
    for sid, traj in zip(sim_ids, trajectories):
        for t, s in zip(traj.times, traj.states):
            rows.append(
                [int(sid), repr(float(t)), repr(float(s[dim_i])), repr(float(s[dim_j]))]
            )
    _write_rows(path, ["sim_id", "t", f"s_{dim_i + 1}", f"s_{dim_j + 1}"], rows)
