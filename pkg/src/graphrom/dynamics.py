"""Latent ODE right-hand side and the explicit-Euler rollout between snapshots."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DivergenceError, ValidationError


@dataclass
class DynNetConfig:
    """Shape of the latent dynamics network.

    The MLP maps (t?, s, mu?) to ds/dt; hidden sizes follow the configured
    spec, tanh hidden activations by default.
    """

    latent_dim: int
    d_mu: int
    include_t: bool = True
    include_mu: bool = True
    hidden_sizes: tuple = (50, 80, 100, 80, 50)
    activation: str = "tanh"

    @property
    def input_dim(self):
        return self.latent_dim + (1 if self.include_t else 0) + (self.d_mu if self.include_mu else 0)

    def mlp_spec(self):
        sizes = [self.input_dim, *self.hidden_sizes, self.latent_dim]
        return ad.MlpSpec(layer_sizes=sizes, activation=self.activation)

    def blocks(self, prefix="dyn"):
        return self.mlp_spec().blocks(prefix)


@dataclass
class LatentTrajectory:
    """Latent states s(t) recorded on a time grid for one signal."""

    times: np.ndarray
    states: np.ndarray           # (len(times), n)
    signal_values: np.ndarray    # (len(times), d_mu)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.states = np.asarray(self.states, dtype=np.float64)
        if not np.all(np.isfinite(self.states)):
            raise DivergenceError("latent trajectory contains non-finite states")


def _dyn_input(config, t, s, mu_t):
    parts = []
    if config.include_t:
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (s.shape[0], 1))
        parts.append(t_arr)
    parts.append(s)
    if config.include_mu:
        parts.append(mu_t)
    if all(isinstance(p, np.ndarray) for p in parts):
        return np.concatenate(parts, axis=-1)
    return ad.concat(parts, axis=-1)


def dyn_rhs(config, params, t, s, mu_t, flat=None):
    """One evaluation of the dynamics network: ds/dt for a batch of states.

    s: (batch, n); mu_t: (batch, d_mu); t: scalar or (batch,).  With flat set
    (a taped Var over the parameter vector) the evaluation is recorded for
    reverse-mode differentiation.
    """
    s_arr = s.value if isinstance(s, ad.Var) else np.asarray(s, dtype=np.float64)
    if s_arr.shape[-1] != config.latent_dim:
        raise ValidationError(
            f"latent state has dimension {s_arr.shape[-1]}, expected {config.latent_dim}"
        )
    x = _dyn_input(config, t, s, np.asarray(mu_t, dtype=np.float64).reshape(s_arr.shape[0], -1))
    return ad.mlp_forward(config.mlp_spec(), params, flat, x, "dyn")


def interp_signal(j, mu_k, mu_k1, n_int):
    """Linear in-time interpolation of the signal between two snapshots."""
    if n_int == 0:
        raise ValidationError("substep count must be positive")
    frac = j / n_int
    return mu_k + frac * (mu_k1 - mu_k)


def rollout_batch(config, params, times, mu_values, dt, flat=None, record_substeps=False):
    """Explicit-Euler integration of the latent ODE for a batch of signals.

    times: (K+1,) snapshot grid; mu_values: (batch, K+1, d_mu) signal values at
    the snapshots.  Between snapshots k and k+1, floor(h/dt) substeps are taken
    with linearly interpolated signal values; the state after the last substep
    is recorded as s(t_{k+1}).  Returns (snapshot_states, substep_records) where
    snapshot_states is a list of (batch, n) states, one per snapshot time, and
    substep_records (t, mu, s triples) is populated when record_substeps is set.
    """
    times = np.asarray(times, dtype=np.float64)
    mu_values = np.asarray(mu_values, dtype=np.float64)
    batch = mu_values.shape[0]
    n = config.latent_dim
    if dt <= 0:
        raise ValidationError("integration step must be positive")
    spacings = np.diff(times)
    if len(spacings) and dt > spacings.min() * (1 + 1e-12):
        raise ValidationError("integration step exceeds the snapshot spacing")

    zero = np.zeros((batch, n))
    s = ad.Var(zero, flat.tape) if flat is not None else zero
    states = [s]
    records = []
    if record_substeps:
        records.append((times[0], mu_values[:, 0], zero))
    for k in range(len(times) - 1):
        h = times[k + 1] - times[k]
        # tolerate last-ulp rounding so dt == spacing always gives one substep
        n_int = max(1, int(np.floor(h / dt + 1e-9)))
        mu_k, mu_k1 = mu_values[:, k], mu_values[:, k + 1]
        for j in range(n_int):
            t_j = times[k] + j * dt
            mu_j = interp_signal(j, mu_k, mu_k1, n_int)
            ds = dyn_rhs(config, params, t_j, s, mu_j, flat=flat)
            s = s + dt * ds
            s_val = s.value if isinstance(s, ad.Var) else s
            if not np.all(np.isfinite(s_val)):
                raise DivergenceError(f"latent state diverged at t = {t_j + dt:.6g}")
            if record_substeps:
                records.append((t_j + dt, interp_signal(j + 1, mu_k, mu_k1, n_int), np.array(s_val)))
        states.append(s)
    return states, records


def euler_rollout(config, params, signal, dt, record_substeps=False):
    """Rollout for a single SignalTable, returning a LatentTrajectory.

    With record_substeps, the trajectory carries every integration substep
    (needed for dense latent interpolation tables); otherwise it records the
    state at snapshot times only.
    """
    states, records = rollout_batch(
        config, params, signal.times, signal.values[None], dt, record_substeps=record_substeps
    )
    if record_substeps:
        times = np.array([r[0] for r in records])
        mus = np.stack([r[1][0] for r in records])
        s = np.stack([r[2][0] for r in records])
        return LatentTrajectory(times=times, states=s, signal_values=mus)
    s = np.stack([st[0] for st in states])
    return LatentTrajectory(times=signal.times, states=s, signal_values=signal.values)
