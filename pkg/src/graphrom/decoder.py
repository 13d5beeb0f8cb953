"""Graph-convolutional decoder: FC lift to node features, then spatial convolutions.

The decode pipeline is: concatenate (t?, s, mu?) -> fully connected stack with
ELU activations -> reshape to (N_h, n_hc) node features -> n_conv convolution
layers, each wrapped in an additive skip connection -> final per-node linear
map to d_u output channels (no activation).  With all convolution parameters
zeroed and identity convolution activation, the conv stage is exactly the
identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ValidationError
from .mesh import compute_pseudo_coords


@dataclass
class DecoderConfig:
    latent_dim: int
    d_mu: int
    num_nodes: int
    d_u: int
    include_t: bool = True
    include_mu: bool = True
    fc_hidden: tuple = (200,)
    n_hc: int = 2
    n_conv: int = 2
    conv_kind: str = "mean_aggregation"   # or "gaussian_mixture"
    n_kernels: int = 4
    conv_activation: str = "elu"
    dim: int = 2                          # spatial dimension of pseudo-coords

    @property
    def input_dim(self):
        return self.latent_dim + (1 if self.include_t else 0) + (self.d_mu if self.include_mu else 0)

    def fc_spec(self):
        sizes = [self.input_dim, *self.fc_hidden, self.num_nodes * self.n_hc]
        return ad.MlpSpec(layer_sizes=sizes, activation="elu")

    def blocks(self, prefix="dec"):
        out = list(self.fc_spec().blocks(f"{prefix}.fc"))
        for k in range(self.n_conv):
            if self.conv_kind == "mean_aggregation":
                out.append((f"{prefix}.conv{k}.W", (self.n_hc, self.n_hc)))
                out.append((f"{prefix}.conv{k}.b", (self.n_hc,)))
            elif self.conv_kind == "gaussian_mixture":
                for q in range(self.n_kernels):
                    out.append((f"{prefix}.conv{k}.kernel{q}.mean", (self.dim,)))
                    out.append((f"{prefix}.conv{k}.kernel{q}.log_prec", (self.dim,)))
                    out.append((f"{prefix}.conv{k}.kernel{q}.W", (self.n_hc, self.n_hc)))
                out.append((f"{prefix}.conv{k}.b", (self.n_hc,)))
            else:
                raise ValidationError(f"unknown conv kind {self.conv_kind!r}")
        out.append((f"{prefix}.out.W", (self.d_u, self.n_hc)))
        out.append((f"{prefix}.out.b", (self.d_u,)))
        return out


def conv_mean(features, agg_matrix, w, b):
    """Normalized-sum graph convolution: mean over N(u) of W h_v, plus bias.

    features: (..., N_h, c_in); w: (c_out, c_in).  The activation is applied by
    the caller.  agg_matrix is the row-normalized adjacency of the graph.
    """
    agg = ad.sparse_matmul(agg_matrix, features)
    if isinstance(w, ad.Var) or isinstance(agg, ad.Var):
        return ad._matmul_wt(agg, w) + b
    return agg @ np.asarray(w).T + np.asarray(b)


def gaussian_edge_weights(pseudo, mean, log_prec):
    """Gaussian kernel weight per directed edge from its pseudo-coordinate.

    w(e) = exp(-1/2 sum_d prec_d (e_d - mean_d)^2), diagonal precision stored
    as log for positivity.
    """
    diff = (-mean) + pseudo if isinstance(mean, ad.Var) else pseudo - mean
    sq = diff * diff
    prec = ad.exp(log_prec) if isinstance(log_prec, ad.Var) else np.exp(log_prec)
    quad = (sq * prec).sum(axis=-1) if isinstance(sq, ad.Var) else np.sum(sq * prec, axis=-1)
    return ad.exp(-0.5 * quad)


def conv_gaussian_mixture(features, graph, kernel_params, b, pseudo=None):
    """Gaussian-mixture convolution over mesh edges.

    out_u = b + (1/|N(u)|) sum_{v in N(u)} sum_q w_q(e_vu) W_q h_v, where
    kernel_params is a list of (mean, log_prec, W) triples.
    """
    if pseudo is None:
        pseudo = compute_pseudo_coords(graph)
    src, dst, e = pseudo
    # e_vu points from the neighbor v toward the receiving node u = dst, so the
    # weight for messages arriving at dst uses the dst-oriented vector.
    deg = graph.degrees().astype(np.float64)[:, None]
    h_src = ad.gather(features, src)
    total = None
    for mean, log_prec, w in kernel_params:
        wts = gaussian_edge_weights(e, mean, log_prec)
        msg = ad._matmul_wt(h_src, w) if isinstance(w, ad.Var) else h_src @ np.asarray(w).T
        if isinstance(wts, ad.Var) or isinstance(msg, ad.Var):
            weighted = msg * _expand(wts)
        else:
            weighted = msg * np.asarray(wts)[..., None]
        total = weighted if total is None else total + weighted
    agg = ad.scatter_add(total, dst, graph.num_nodes)
    return agg / deg + b


def _expand(wts):
    if isinstance(wts, ad.Var):
        return wts.reshape(*wts.shape, 1)
    return np.asarray(wts)[..., None]


def _fc_stage(config, params, flat, t, s, mu_t):
    parts = []
    s_arr = s.value if isinstance(s, ad.Var) else np.asarray(s, dtype=np.float64)
    batch = s_arr.shape[0]
    if s_arr.shape[-1] != config.latent_dim:
        raise ValidationError(
            f"latent input has dimension {s_arr.shape[-1]}, expected {config.latent_dim}"
        )
    if config.include_t:
        parts.append(np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (batch, 1)))
    parts.append(s)
    if config.include_mu:
        parts.append(np.asarray(mu_t, dtype=np.float64).reshape(batch, -1))
    if all(isinstance(p, np.ndarray) for p in parts):
        x = np.concatenate(parts, axis=-1)
    else:
        x = ad.concat(parts, axis=-1)
    h = ad.mlp_forward(config.fc_spec(), params, flat, x, "dec.fc")
    return h.reshape(batch, config.num_nodes, config.n_hc) if isinstance(h, ad.Var) else h.reshape(
        batch, config.num_nodes, config.n_hc
    )


def _conv_stage(config, params, flat, h, graph, agg_matrix, pseudo):
    act = ad.ACTIVATIONS[config.conv_activation]
    for k in range(config.n_conv):
        if config.conv_kind == "mean_aggregation":
            w = _param(params, flat, f"dec.conv{k}.W")
            b = _param(params, flat, f"dec.conv{k}.b")
            update = conv_mean(h, agg_matrix, w, b)
        else:
            kernels = [
                (
                    _param(params, flat, f"dec.conv{k}.kernel{q}.mean"),
                    _param(params, flat, f"dec.conv{k}.kernel{q}.log_prec"),
                    _param(params, flat, f"dec.conv{k}.kernel{q}.W"),
                )
                for q in range(config.n_kernels)
            ]
            b = _param(params, flat, f"dec.conv{k}.b")
            update = conv_gaussian_mixture(h, graph, kernels, b, pseudo=pseudo)
        h = h + act(update)      # additive skip connection around every layer
    return h


def _param(params, flat, name):
    if flat is not None:
        return params.slice_of(flat, name)
    return params.block(name)


def decode(config, params, t, s, mu_t, graph, flat=None, agg_matrix=None, pseudo=None,
           skip_conv=False):
    """Full decode: (t, s, mu) -> field of shape (batch, N_h, d_u), scaled units.

    skip_conv bypasses the convolution stage entirely (FC lift plus final
    linear map); with zeroed conv parameters and identity conv activation the
    two paths agree to machine precision.
    """
    if graph.num_nodes != config.num_nodes:
        raise ValidationError(
            f"graph has {graph.num_nodes} nodes but decoder expects {config.num_nodes}"
        )
    if agg_matrix is None and config.conv_kind == "mean_aggregation" and not skip_conv:
        agg_matrix = graph.mean_aggregation_matrix()
    if pseudo is None and config.conv_kind == "gaussian_mixture" and not skip_conv:
        pseudo = compute_pseudo_coords(graph)
    h = _fc_stage(config, params, flat, t, s, mu_t)
    if not skip_conv:
        h = _conv_stage(config, params, flat, h, graph, agg_matrix, pseudo)
    w_out = _param(params, flat, "dec.out.W")
    b_out = _param(params, flat, "dec.out.b")
    if isinstance(h, ad.Var) or isinstance(w_out, ad.Var):
        return ad._matmul_wt(h, w_out) + b_out
    return h @ np.asarray(w_out).T + np.asarray(b_out)
