"""Snapshot datasets: signals, fields, scaling, splits, and the on-disk format.

Dataset directory layout:
  mesh.json      node coordinates and connectivity
  signals.csv    header sim_id,t,mu_1,...,mu_{d_mu}; one row per (sim, time)
  snapshots.f64  little-endian binary, magic b"LDGC", version 1 (u32),
                 u32 N_sim, N_t, N_h, d_u; N_t f64 times; f64 data in
                 [sim][time][node][channel] order
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, StorageError, ValidationError
from .mesh import MeshGraph, load_mesh, save_mesh

MAGIC = b"LDGC"
VERSION = 1


@dataclass
class SignalTable:
    """One input signal: values mu(t) on the shared time grid."""

    sim_id: int
    times: np.ndarray          # (N_t,) strictly increasing
    values: np.ndarray         # (N_t, d_mu)
    constant_flag: bool = False

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(len(self.times), -1)
        if np.any(np.diff(self.times) <= 0):
            raise ValidationError(f"signal {self.sim_id}: times are not strictly increasing")
        self.constant_flag = bool(np.all(self.values == self.values[0]))

    @property
    def d_mu(self):
        return self.values.shape[1]


@dataclass
class SnapshotDataset:
    """Full-order snapshot data for a family of simulations on one mesh."""

    mesh: MeshGraph
    signals: list
    fields_u: np.ndarray       # (N_sim, N_t, N_h, d_u)

    def __post_init__(self):
        self.fields_u = np.asarray(self.fields_u, dtype=np.float64)
        n_sim, n_t, n_h, _ = self.fields_u.shape
        if len(self.signals) != n_sim:
            raise ValidationError("signal count disagrees with fields_u")
        if n_h != self.mesh.num_nodes:
            raise ValidationError("fields_u node count disagrees with mesh")
        for sig in self.signals:
            if len(sig.times) != n_t:
                raise ValidationError(f"signal {sig.sim_id}: time grid length mismatch")
            if not np.array_equal(sig.times, self.signals[0].times):
                raise ValidationError("all simulations must share the same time grid")
        if not np.all(np.isfinite(self.fields_u)):
            raise ValidationError("fields_u contains non-finite values")

    @property
    def num_sims(self):
        return self.fields_u.shape[0]

    @property
    def num_times(self):
        return self.fields_u.shape[1]

    @property
    def d_u(self):
        return self.fields_u.shape[3]

    @property
    def times(self):
        return self.signals[0].times

    def trimmed(self, drop_first=0, subsample=1):
        """Copy with leading snapshots removed and/or the time grid subsampled."""
        sel = np.arange(drop_first, self.num_times, subsample)
        signals = [
            SignalTable(s.sim_id, s.times[sel], s.values[sel]) for s in self.signals
        ]
        return SnapshotDataset(self.mesh, signals, self.fields_u[:, sel])


@dataclass
class ScalingParams:
    """Per-node per-channel affine scaling: u_tilde = (u - alpha1) / alpha2."""

    alpha1: np.ndarray   # (N_h, d_u)
    alpha2: np.ndarray   # (N_h, d_u), strictly positive


@dataclass
class SplitSpec:
    train_sim_ids: np.ndarray
    train_time_cutoff: int
    rng_seed: int

    def train_time_indices(self):
        return np.arange(self.train_time_cutoff + 1)


def split_dataset(dataset, ratio_mu, ratio_t, seed):
    """Uniformly random simulation subset plus a time cutoff, deterministic in seed.

    The simulation count is floor(ratio_mu * N_sim) and the cutoff index is
    floor(ratio_t * N_t) with N_t counted as intervals (times - 1).
    """
    if not (0 < ratio_mu <= 1 and 0 < ratio_t <= 1):
        raise ConfigurationError("split ratios must lie in (0, 1]")
    n_sim = dataset.num_sims
    n_train = int(ratio_mu * n_sim)
    if n_train == 0:
        raise ConfigurationError("empty training split")
    rng = np.random.default_rng(seed)
    ids = np.sort(rng.permutation(n_sim)[:n_train])
    n_int = dataset.num_times - 1
    cutoff = int(ratio_t * n_int) if n_int > 0 else 0
    return SplitSpec(train_sim_ids=ids, train_time_cutoff=cutoff, rng_seed=seed)


def compute_scaling(dataset, split):
    """Midpoint/half-range statistics over the training pairs only.

    Degenerate ranges (max == min at a node-channel) get alpha2 = 1 so the
    scaled value is exactly 0 and the inverse map stays well defined.
    """
    ids = np.asarray(split.train_sim_ids)
    if ids.size == 0:
        raise ConfigurationError("empty training set")
    tsel = split.train_time_indices()
    sub = dataset.fields_u[np.ix_(ids, tsel)]          # (n_train, n_t_train, N_h, d_u)
    umax = sub.max(axis=(0, 1))
    umin = sub.min(axis=(0, 1))
    alpha1 = 0.5 * (umax + umin)
    alpha2 = 0.5 * (umax - umin)
    alpha2 = np.where(alpha2 > 0.0, alpha2, 1.0)
    return ScalingParams(alpha1=alpha1, alpha2=alpha2)


def apply_scaling(fields, params):
    fields = np.asarray(fields, dtype=np.float64)
    if fields.shape[-2:] != params.alpha1.shape:
        raise ValidationError("field shape disagrees with scaling parameters")
    return (fields - params.alpha1) / params.alpha2


def invert_scaling(scaled, params):
    scaled = np.asarray(scaled, dtype=np.float64)
    if scaled.shape[-2:] != params.alpha1.shape:
        raise ValidationError("field shape disagrees with scaling parameters")
    return scaled * params.alpha2 + params.alpha1


def store_dataset(dataset, path):
    """Write the canonical dataset directory; the round trip is bit-exact."""
    os.makedirs(path, exist_ok=True)
    save_mesh(dataset.mesh, os.path.join(path, "mesh.json"))
    d_mu = dataset.signals[0].d_mu
    with open(os.path.join(path, "signals.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sim_id", "t"] + [f"mu_{k + 1}" for k in range(d_mu)])
        for sig in dataset.signals:
            for t, mu in zip(sig.times, sig.values):
                writer.writerow([sig.sim_id, repr(float(t))] + [repr(float(v)) for v in mu])
    n_sim, n_t, n_h, d_u = dataset.fields_u.shape
    with open(os.path.join(path, "snapshots.f64"), "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<5I", VERSION, n_sim, n_t, n_h, d_u))
        fh.write(dataset.times.astype("<f8").tobytes())
        fh.write(dataset.fields_u.astype("<f8").tobytes())


def load_dataset(path):
    mesh = load_mesh(os.path.join(path, "mesh.json"))
    header_fmt = "<5I"
    with open(os.path.join(path, "snapshots.f64"), "rb") as fh:
        blob = fh.read()
    head = len(MAGIC) + struct.calcsize(header_fmt)
    if len(blob) < head:
        raise StorageError(f"snapshots.f64 truncated: {len(blob)} bytes, header needs {head}")
    if blob[: len(MAGIC)] != MAGIC:
        raise StorageError("snapshots.f64 magic mismatch")
    version, n_sim, n_t, n_h, d_u = struct.unpack_from(header_fmt, blob, len(MAGIC))
    if version != VERSION:
        raise StorageError(f"snapshots.f64 version {version}, expected {VERSION}")
    expected = head + 8 * (n_t + n_sim * n_t * n_h * d_u)
    if len(blob) != expected:
        raise StorageError(
            f"snapshots.f64 size mismatch: expected {expected} bytes, got {len(blob)}"
        )
    times = np.frombuffer(blob, dtype="<f8", count=n_t, offset=head)
    fields = np.frombuffer(blob, dtype="<f8", offset=head + 8 * n_t)
    fields = fields.reshape(n_sim, n_t, n_h, d_u).copy()

    per_sim = {i: [] for i in range(n_sim)}
    with open(os.path.join(path, "signals.csv"), newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        d_mu = len(header) - 2
        for row in reader:
            per_sim[int(row[0])].append([float(v) for v in row[1:]])
    signals = []
    for i in range(n_sim):
        rows = np.asarray(per_sim[i], dtype=np.float64)
        if rows.shape[0] != n_t:
            raise StorageError(f"signals.csv: simulation {i} has {rows.shape[0]} rows, expected {n_t}")
        if not np.array_equal(rows[:, 0], times):
            raise StorageError(f"signals.csv: simulation {i} time grid disagrees with snapshots.f64")
        signals.append(SignalTable(i, rows[:, 0], rows[:, 1 : 1 + d_mu]))
    return SnapshotDataset(mesh=mesh, signals=signals, fields_u=fields)
