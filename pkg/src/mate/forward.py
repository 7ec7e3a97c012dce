"""The deterministic forward graph: parameters -> flows/times -> loss.

One forward pass evaluates, in order: the polynomial kernel of the link-flow
parameters, auxiliary travel times, path utilities and probabilities, trip
generation, destination probabilities, O-D flows, path flows, link flows and
finally the travel times induced by the assigned flows. All functions are
pure; identical inputs give bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import IncidenceMatrices
from .observations import ObservationSet, Sample
from .params import ModelParams

__all__ = [
    "NumericError",
    "LossWeights",
    "LossReport",
    "ForwardOutputs",
    "polynomial_kernel",
    "polynomial_kernel_derivative",
    "performance_times",
    "path_utilities",
    "path_probabilities",
    "trip_generation",
    "destination_probabilities",
    "od_flows",
    "path_flows",
    "link_flows",
    "forward_pass",
    "loss",
    "relative_gap",
    "blockwise_softmax",
]


class NumericError(ArithmeticError):
    """Non-finite value encountered; message names the offending layer."""


@dataclass
class LossWeights:
    lx: float = 1.0
    lt: float = 1.0
    le: float = 1.0
    lg: float = 0.0
    lq: float = 0.0

    def __post_init__(self):
        if min(self.lx, self.lt, self.le, self.lg, self.lq) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossReport:
    total: float
    lx: float  # normalized components, before weighting
    lt: float
    le: float
    lg: float
    lq: float
    weights: LossWeights
    rho: float
    mape_x: float
    mape_t: float
    flags: list = field(default_factory=list)


@dataclass
class ForwardOutputs:
    y: np.ndarray
    t_tilde: np.ndarray
    v: np.ndarray
    p: np.ndarray
    g: np.ndarray
    phi: np.ndarray
    q: np.ndarray
    f: np.ndarray
    x: np.ndarray
    y_tilde: np.ndarray
    t: np.ndarray
    # cached intermediates for the backward pass
    link_utility: np.ndarray = None
    g_active: np.ndarray = None
    period_slice: int = 0


# ---------------------------------------------------------------------------
# blockwise softmax machinery
# ---------------------------------------------------------------------------

def _block_starts(labels: np.ndarray) -> np.ndarray:
    """Start offsets of contiguous equal-label runs; labels must be sorted."""
    if labels.size == 0:
        return np.zeros(0, dtype=np.int64)
    if np.any(np.diff(labels) < 0):
        raise ValueError("block labels must be contiguous (sorted)")
    return np.flatnonzero(np.r_[True, np.diff(labels) != 0])


def blockwise_softmax(values: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Softmax normalized within each contiguous block of equal labels.

    The per-block maximum is subtracted before exponentiation so large
    utilities cannot overflow.
    """
    starts = _block_starts(labels)
    block_of = np.cumsum(np.r_[False, np.diff(labels) != 0])
    vmax = np.maximum.reduceat(values, starts)
    e = np.exp(values - vmax[block_of])
    denom = np.add.reduceat(e, starts)
    return e / denom[block_of]


def _softmax_backward(p: np.ndarray, grad_p: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of a blockwise softmax."""
    starts = _block_starts(labels)
    block_of = np.cumsum(np.r_[False, np.diff(labels) != 0])
    inner = np.add.reduceat(grad_p * p, starts)
    return p * (grad_p - inner[block_of])


# ---------------------------------------------------------------------------
# layer operations
# ---------------------------------------------------------------------------

def polynomial_kernel(x: np.ndarray, beta: np.ndarray, capacities: np.ndarray) -> np.ndarray:
    """Phi(x) = sum_k beta_k (x / capacity)^k, k = 1..b, componentwise."""
    r = x / capacities
    out = np.zeros_like(r)
    rk = np.ones_like(r)
    for bk in beta:
        rk = rk * r
        out = out + bk * rk
    return out


def polynomial_kernel_derivative(x: np.ndarray, beta: np.ndarray, capacities: np.ndarray) -> np.ndarray:
    """dPhi/dx, componentwise."""
    r = x / capacities
    out = np.zeros_like(r)
    rk = np.ones_like(r)
    for k, bk in enumerate(beta, start=1):
        out = out + bk * k * rk / capacities
        rk = rk * r
    return out


def performance_times(y: np.ndarray, w: np.ndarray, inc: IncidenceMatrices,
                      tmin: np.ndarray) -> np.ndarray:
    """t = tmin * (1 + (E o W) y) with W given by its values on the E support."""
    interact = np.bincount(inc.e_rows, weights=w * y[inc.e_cols], minlength=tmin.size)
    return tmin * (1.0 + interact)


def _interaction_transpose(vec: np.ndarray, w: np.ndarray, inc: IncidenceMatrices) -> np.ndarray:
    """(E o W)^T vec, used by the backward pass."""
    return np.bincount(inc.e_cols, weights=w * vec[inc.e_rows], minlength=vec.size)


def path_utilities(t_tilde: np.ndarray, Z: np.ndarray, theta: np.ndarray,
                   gamma: np.ndarray, inc: IncidenceMatrices) -> np.ndarray:
    """Link utilities [t_tilde Z] theta + gamma summed along each path."""
    link_u = t_tilde * theta[0] + gamma
    if Z.size:
        link_u = link_u + Z @ theta[1:]
    return inc.D.T @ link_u


def path_probabilities(v: np.ndarray, inc: IncidenceMatrices) -> np.ndarray:
    """Logit path choice, normalized within each O-D pair's path block."""
    return blockwise_softmax(v, inc.od_of_path)


def trip_generation(O: np.ndarray, kappa: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """g = max(0, O kappa + delta), projected to the nonnegative orthant."""
    pre = delta.copy()
    if O.size:
        pre = pre + O @ kappa
    return np.maximum(0.0, pre)


def destination_probabilities(omega: np.ndarray, inc: IncidenceMatrices) -> np.ndarray:
    """Logit destination choice, normalized within each origin's block."""
    return blockwise_softmax(omega, inc.origin_of_od)


def od_flows(g: np.ndarray, phi: np.ndarray, inc: IncidenceMatrices) -> np.ndarray:
    """q = (L^T g) o phi; block sums of q reproduce g wherever phi sums to 1."""
    return (inc.L.T @ g) * phi


def path_flows(q: np.ndarray, p: np.ndarray, inc: IncidenceMatrices) -> np.ndarray:
    """f = (M^T q) o p."""
    return (inc.M.T @ q) * p


def link_flows(f: np.ndarray, inc: IncidenceMatrices) -> np.ndarray:
    """x = D f."""
    return inc.D @ f


def _check_finite(arr: np.ndarray, layer: str):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value in layer {layer!r}")


def forward_pass(params: ModelParams, obs: ObservationSet, sample: Sample,
                 inc: IncidenceMatrices, capacities: np.ndarray,
                 tmin: np.ndarray) -> ForwardOutputs:
    """Evaluate the full chain for one sample, returning all intermediates."""
    i = params.slice_for(sample.period_id)
    Z = obs.Z_for(sample, inc.n_links, params.theta.shape[1] - 1)
    O = obs.O_for(sample, inc.n_nodes, params.kappa.shape[1])

    y = polynomial_kernel(params.xhat[i], params.beta, capacities)
    _check_finite(y, "polynomial_kernel")
    t_tilde = performance_times(y, params.w, inc, tmin)
    _check_finite(t_tilde, "performance_times")
    v = path_utilities(t_tilde, Z, params.theta[i], params.gamma, inc)
    _check_finite(v, "path_utilities")
    p = path_probabilities(v, inc)
    _check_finite(p, "path_probabilities")
    pre = params.delta[i] + (O @ params.kappa[i] if O.size else 0.0)
    g = np.maximum(0.0, pre)
    _check_finite(g, "trip_generation")
    phi = destination_probabilities(params.omega[i], inc)
    _check_finite(phi, "destination_probabilities")
    q = od_flows(g, phi, inc)
    f = path_flows(q, p, inc)
    x = link_flows(f, inc)
    _check_finite(x, "link_flows")
    y_tilde = polynomial_kernel(x, params.beta, capacities)
    t = performance_times(y_tilde, params.w, inc, tmin)
    _check_finite(t, "performance_times_output")

    link_u = t_tilde * params.theta[i][0] + params.gamma
    if Z.size:
        link_u = link_u + Z @ params.theta[i][1:]
    return ForwardOutputs(
        y=y, t_tilde=t_tilde, v=v, p=p, g=g, phi=phi, q=q, f=f, x=x,
        y_tilde=y_tilde, t=t, link_utility=link_u,
        g_active=(pre > 0.0).astype(float), period_slice=i,
    )


def relative_gap(x: np.ndarray, xhat: np.ndarray) -> float:
    """rho = ||x - xhat||_1 / ||x||_1; NaN sentinel when x is all zero."""
    norm = float(np.abs(x).sum())
    if norm == 0.0:
        return float("nan")
    return float(np.abs(x - xhat).sum() / norm)


def _mape(est: np.ndarray, obs_vals: np.ndarray, mask: np.ndarray) -> float:
    sel = mask & (obs_vals != 0) & ~np.isnan(obs_vals)
    if not sel.any():
        return float("nan")
    return float(np.mean(np.abs(est[sel] - obs_vals[sel]) / np.abs(obs_vals[sel])) * 100.0)


def loss(out: ForwardOutputs, params: ModelParams, obs: ObservationSet,
         weights: LossWeights, sample: Sample,
         sigma_x_reference: float | None = None) -> LossReport:
    """Weighted, normalized squared-error loss for one sample.

    Flow and time components are summed over non-missing entries and divided
    by n * sigma of the sample's observed values; the equilibrium component
    is divided by |A| * sigma of the observed flows. When a normalizer is
    degenerate (no observations or zero dispersion) it falls back to 1 and
    the event is flagged rather than raising.
    """
    i = out.period_slice
    flags = []

    def _norm(n, sigma, label):
        if n == 0 or sigma == 0.0:
            flags.append(f"{label}: degenerate normalizer, fallback 1")
            return 1.0
        return n * sigma

    lx = 0.0
    if sample.n_x:
        d = out.x[sample.flow_mask] - sample.flows[sample.flow_mask]
        lx = float(d @ d) / _norm(sample.n_x, sample.sigma_x, "flow")
    elif weights.lx > 0:
        flags.append("flow: no observations, component contributes 0")

    lt = 0.0
    if sample.n_t:
        d = out.t[sample.time_mask] - sample.times[sample.time_mask]
        lt = float(d @ d) / _norm(sample.n_t, sample.sigma_t, "time")
    elif weights.lt > 0:
        flags.append("time: no observations, component contributes 0")

    d = out.x - params.xhat[i]
    if sample.n_x and sample.sigma_x > 0:
        sigma_e = sample.sigma_x
    elif sigma_x_reference:
        sigma_e = sigma_x_reference
    else:
        sigma_e = 1.0
        if weights.le > 0:
            flags.append("equilibrium: sigma fallback 1")
    le = float(d @ d) / (out.x.size * sigma_e)

    lg = 0.0
    if weights.lg > 0 and sample.period_id in obs.ref_generation:
        d = out.g - obs.ref_generation[sample.period_id]
        lg = float(d @ d)
    lq = 0.0
    if weights.lq > 0 and sample.period_id in obs.ref_od:
        d = out.q - obs.ref_od[sample.period_id]
        lq = float(d @ d)

    total = (weights.lx * lx + weights.lt * lt + weights.le * le
             + weights.lg * lg + weights.lq * lq)
    return LossReport(
        total=total, lx=lx, lt=lt, le=le, lg=lg, lq=lq, weights=weights,
        rho=relative_gap(out.x, params.xhat[i]),
        mape_x=_mape(out.x, sample.flows, sample.flow_mask),
        mape_t=_mape(out.t, sample.times, sample.time_mask),
        flags=flags,
    )
