"""Gradients, optimizer and training loops.

The backward pass is a hand-derived adjoint of the fixed forward chain in
:mod:`mate.forward`; its only contract is agreement with central finite
differences. Optimization uses Adam with per-group learning-rate
multipliers followed by projection onto the feasible box after every step.
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import forward as fwd
from .network import IncidenceMatrices
from .observations import ObservationSet, Sample
from .params import GROUPS, ModelParams, ParamSpec, project

__all__ = [
    "TrainConfig",
    "EpochRecord",
    "TrainTrace",
    "AdamState",
    "assign_stalogit",
    "gradients",
    "adam_step",
    "fit",
    "solve_equilibrium",
    "infer",
    "trace_to_csv",
]


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 1
    learning_rate: float = 0.05
    lr_decay: float = 1.0  # multiplicative per-epoch decay
    weights: fwd.LossWeights = field(default_factory=fwd.LossWeights)
    gap_target: float | None = None
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    sigma_x_reference: float | None = None  # equilibrium normalizer for unobserved samples

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    loss_total: float
    loss_x: float
    loss_t: float
    loss_e: float
    mape_x: float
    mape_t: float
    rel_gap: float
    seconds: float


@dataclass
class TrainTrace:
    records: list = field(default_factory=list)
    converged: bool = True
    final_gap: float = float("nan")
    flags: list = field(default_factory=list)

    def append(self, rec: EpochRecord):
        self.records.append(rec)


def trace_to_csv(trace: TrainTrace) -> str:
    buf = io.StringIO()
    buf.write("epoch,loss_total,loss_x,loss_t,loss_e,mape_x,mape_t,rel_gap,seconds\n")
    for r in trace.records:
        buf.write(
            f"{r.epoch},{r.loss_total!r},{r.loss_x!r},{r.loss_t!r},{r.loss_e!r},"
            f"{r.mape_x!r},{r.mape_t!r},{r.rel_gap!r},{r.seconds!r}\n"
        )
    return buf.getvalue()


def assign_stalogit(inc: IncidenceMatrices, q: np.ndarray, theta: np.ndarray,
                    gamma: np.ndarray, Z: np.ndarray, t: np.ndarray) -> np.ndarray:
    """One logit network-loading pass at fixed travel times.

    Distributes the O-D demand over paths by a logit model on path
    utilities evaluated at ``t`` and maps the resulting path flows to links.
    """
    link_u = t * theta[0] + gamma
    if Z.size:
        link_u = link_u + Z @ theta[1:]
    v = inc.D.T @ link_u
    p = fwd.blockwise_softmax(v, inc.od_of_path)
    f = (inc.M.T @ q) * p
    return inc.D @ f


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _loss_normalizers(sample: Sample, n_links: int, sigma_x_reference=None):
    norm_x = sample.n_x * sample.sigma_x if sample.n_x and sample.sigma_x > 0 else 1.0
    norm_t = sample.n_t * sample.sigma_t if sample.n_t and sample.sigma_t > 0 else 1.0
    sigma_e = sample.sigma_x if sample.n_x and sample.sigma_x > 0 else (
        sigma_x_reference if sigma_x_reference else 1.0
    )
    return norm_x, norm_t, n_links * sigma_e


def gradients(params: ModelParams, obs: ObservationSet, weights: fwd.LossWeights,
              sample: Sample, inc: IncidenceMatrices, capacities: np.ndarray,
              tmin: np.ndarray, spec: ParamSpec | None = None,
              out: fwd.ForwardOutputs | None = None,
              sigma_x_reference: float | None = None) -> dict:
    """Exact sample-loss gradient for every parameter group.

    Frozen groups (``spec.group(name).trainable`` false) are returned as
    zeros. ``out`` may pass a precomputed forward evaluation.
    """
    if out is None:
        out = fwd.forward_pass(params, obs, sample, inc, capacities, tmin)
    i = out.period_slice
    A = inc.n_links
    Z = obs.Z_for(sample, A, params.theta.shape[1] - 1)
    O = obs.O_for(sample, inc.n_nodes, params.kappa.shape[1])
    norm_x, norm_t, norm_e = _loss_normalizers(sample, A, sigma_x_reference)

    grads = {g: np.zeros_like(getattr(params, g)) for g in GROUPS}

    # loss partials w.r.t. the graph outputs
    gx = np.zeros(A)
    if weights.lx > 0 and sample.n_x:
        m = sample.flow_mask
        gx[m] += 2.0 * weights.lx * (out.x[m] - sample.flows[m]) / norm_x
    gt = np.zeros(A)
    if weights.lt > 0 and sample.n_t:
        m = sample.time_mask
        gt[m] += 2.0 * weights.lt * (out.t[m] - sample.times[m]) / norm_t
    eq_res = 2.0 * weights.le * (out.x - params.xhat[i]) / norm_e
    gx += eq_res
    grads["xhat"][i] -= eq_res

    # t = tmin o (1 + (E o W) y_tilde)
    a_t = tmin * gt
    gy_tilde = fwd._interaction_transpose(a_t, params.w, inc)
    grads["w"] += a_t[inc.e_rows] * out.y_tilde[inc.e_cols]

    # y_tilde = Phi(x)
    gx += gy_tilde * fwd.polynomial_kernel_derivative(out.x, params.beta, capacities)
    r = out.x / capacities
    rk = np.ones(A)
    for k in range(params.beta.size):
        rk = rk * r
        grads["beta"][k] += gy_tilde @ rk

    # x = D f ; f = (M^T q) o p
    gf = inc.D.T @ gx
    gq = inc.M @ (gf * out.p)
    gp = gf * (inc.M.T @ out.q)
    if weights.lq > 0 and sample.period_id in obs.ref_od:
        gq = gq + 2.0 * weights.lq * (out.q - obs.ref_od[sample.period_id])

    # q = (L^T g) o phi
    gg = inc.L @ (gq * out.phi)
    gphi = gq * (inc.L.T @ out.g)
    if weights.lg > 0 and sample.period_id in obs.ref_generation:
        gg = gg + 2.0 * weights.lg * (out.g - obs.ref_generation[sample.period_id])

    # phi = blockwise softmax(omega); g = relu(O kappa + delta)
    grads["omega"][i] = fwd._softmax_backward(out.phi, gphi, inc.origin_of_od)
    gpre = gg * out.g_active
    grads["delta"][i] = gpre
    if O.size:
        grads["kappa"][i] = O.T @ gpre

    # p = blockwise softmax(v); v = D^T link_utility
    gv = fwd._softmax_backward(out.p, gp, inc.od_of_path)
    gu = inc.D @ gv
    grads["theta"][i, 0] = out.t_tilde @ gu
    if Z.size:
        grads["theta"][i, 1:] = Z.T @ gu
    grads["gamma"] += gu

    # t_tilde = tmin o (1 + (E o W) y); y = Phi(xhat)
    gt_tilde = params.theta[i][0] * gu
    a_tt = tmin * gt_tilde
    gy = fwd._interaction_transpose(a_tt, params.w, inc)
    grads["w"] += a_tt[inc.e_rows] * out.y[inc.e_cols]
    grads["xhat"][i] += gy * fwd.polynomial_kernel_derivative(params.xhat[i], params.beta, capacities)
    r = params.xhat[i] / capacities
    rk = np.ones(A)
    for k in range(params.beta.size):
        rk = rk * r
        grads["beta"][k] += gy @ rk

    if spec is not None:
        for name in GROUPS:
            if not spec.group(name).trainable:
                grads[name][...] = 0.0
    for name, arr in grads.items():
        if not np.all(np.isfinite(arr)):
            raise fwd.NumericError(f"non-finite gradient in group {name!r}")
    return grads


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamState":
        return cls(
            m={g: np.zeros_like(getattr(params, g)) for g in GROUPS},
            v={g: np.zeros_like(getattr(params, g)) for g in GROUPS},
        )


def adam_step(params: ModelParams, grads: dict, state: AdamState,
              config: TrainConfig, spec: ParamSpec, inc: IncidenceMatrices,
              lr: float | None = None) -> ModelParams:
    """One Adam update over all trainable groups, then projection."""
    lr = config.learning_rate if lr is None else lr
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    out = params.copy()
    for name in GROUPS:
        gs = spec.group(name)
        if not gs.trainable:
            continue
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        mhat = state.m[name] / (1 - b1 ** t)
        vhat = state.v[name] / (1 - b2 ** t)
        step = lr * np.asarray(gs.lr_mult) * mhat / (np.sqrt(vhat) + config.eps)
        getattr(out, name)[...] = getattr(out, name) - step
    return project(out, spec, inc)


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def _epoch_summary(reports: list) -> dict:
    def _nanmean(vals):
        vals = [v for v in vals if v == v]  # drop NaN
        return float(np.mean(vals)) if vals else float("nan")

    return {
        "loss_total": _nanmean([r.total for r in reports]),
        "loss_x": _nanmean([r.lx for r in reports]),
        "loss_t": _nanmean([r.lt for r in reports]),
        "loss_e": _nanmean([r.le for r in reports]),
        "mape_x": _nanmean([r.mape_x for r in reports]),
        "mape_t": _nanmean([r.mape_t for r in reports]),
        "rel_gap": _nanmean([r.rho for r in reports]),
    }


def fit(params: ModelParams, obs: ObservationSet, config: TrainConfig,
        spec: ParamSpec, inc: IncidenceMatrices, capacities: np.ndarray,
        tmin: np.ndarray, state: AdamState | None = None):
    """Run the per-sample gradient training loop (Algorithm: forward,
    backward, Adam update, projection) and return updated params + trace.

    The sample order is shuffled once from the seed and then fixed across
    epochs; with a fixed seed the whole run is bit-reproducible.
    """
    if obs.n_samples == 0:
        raise ValueError("observation set is empty")
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(obs.n_samples)
    state = state or AdamState.for_params(params)
    trace = TrainTrace()
    params = params.copy()
    lr = config.learning_rate

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        reports = []
        batch = []
        for pos, idx in enumerate(order):
            sample = obs.samples[idx]
            out = fwd.forward_pass(params, obs, sample, inc, capacities, tmin)
            reports.append(fwd.loss(out, params, obs, config.weights, sample,
                                    sigma_x_reference=config.sigma_x_reference))
            try:
                g = gradients(params, obs, config.weights, sample, inc,
                              capacities, tmin, spec=spec, out=out,
                              sigma_x_reference=config.sigma_x_reference)
            except fwd.NumericError as exc:
                raise fwd.NumericError(
                    f"epoch {epoch}, sample {sample.sample_id}: {exc}"
                ) from exc
            batch.append(g)
            if len(batch) == config.batch_size or pos == obs.n_samples - 1:
                if len(batch) == 1:
                    total = batch[0]
                else:
                    total = {k: sum(b[k] for b in batch) for k in batch[0]}
                params = adam_step(params, total, state, config, spec, inc, lr=lr)
                batch = []
        summary = _epoch_summary(reports)
        trace.append(EpochRecord(
            epoch=epoch, seconds=time.perf_counter() - t0, **summary
        ))
        trace.final_gap = summary["rel_gap"]
        lr *= config.lr_decay
        if config.gap_target is not None and summary["rel_gap"] <= config.gap_target:
            break
    if config.gap_target is not None:
        trace.converged = bool(trace.final_gap <= config.gap_target)
    return params, trace


def _frozen_except_xhat(spec: ParamSpec) -> ParamSpec:
    out = ParamSpec(
        theta_signs=spec.theta_signs, n_poly=spec.n_poly,
        n_z_features=spec.n_z_features, n_o_features=spec.n_o_features,
    )
    for name in GROUPS:
        gs = spec.group(name)
        out.groups[name] = replace(gs, trainable=(name == "xhat"))
    return out


def solve_equilibrium(params: ModelParams, obs: ObservationSet, config: TrainConfig,
                      spec: ParamSpec, inc: IncidenceMatrices,
                      capacities: np.ndarray, tmin: np.ndarray):
    """Drive the link-flow parameters to a fixed point of the assignment map.

    Only the link-flow parameters are trained and the loss keeps only its
    equilibrium component. Stops once the mean relative gap falls below the
    target; on non-convergence the best iterate is returned with
    ``trace.converged`` false.
    """
    eq_config = replace(
        config,
        weights=fwd.LossWeights(lx=0.0, lt=0.0, le=1.0),
        gap_target=config.gap_target if config.gap_target is not None else 1e-4,
    )
    eq_spec = _frozen_except_xhat(spec)
    best = None
    best_gap = np.inf
    state = AdamState.for_params(params)
    trace = TrainTrace()
    cur = params
    lr = config.learning_rate
    for epoch in range(config.epochs):
        step_cfg = replace(eq_config, epochs=1, learning_rate=lr, lr_decay=1.0,
                           seed=config.seed)
        cur, t1 = fit(cur, obs, step_cfg, eq_spec, inc, capacities, tmin, state=state)
        rec = t1.records[0]
        trace.append(replace(rec, epoch=epoch))
        gap = rec.rel_gap
        if gap == gap and gap < best_gap:
            best_gap, best = gap, cur.copy()
        if gap == gap and gap <= eq_config.gap_target:
            break
        lr *= config.lr_decay
    trace.final_gap = best_gap if best is not None else float("nan")
    trace.converged = bool(best_gap <= eq_config.gap_target)
    if not trace.converged:
        trace.flags.append("equilibrium: gap target not reached, best iterate returned")
    return (best if best is not None else cur), trace


def infer(params: ModelParams, obs: ObservationSet, config: TrainConfig,
          spec: ParamSpec, inc: IncidenceMatrices, capacities: np.ndarray,
          tmin: np.ndarray, target_gap: float):
    """Network-wide estimation on samples without flow/time observations.

    All groups except the link-flow parameters are frozen; the link flows
    are adjusted until the relative gap crosses ``target_gap`` (e.g. the
    recorded training-stage gap), then the per-sample outputs are returned.
    """
    inf_spec = _frozen_except_xhat(spec)
    weights = fwd.LossWeights(lx=1.0, lt=1.0, le=config.weights.le or 1.0)
    run_cfg = replace(config, weights=weights, gap_target=max(target_gap, 0.0) or None)
    trained, trace = fit(params.copy(), obs, run_cfg, inf_spec, inc, capacities, tmin)
    if target_gap > 0 and trace.final_gap == trace.final_gap:
        rel = abs(trace.final_gap - target_gap) / target_gap
        if rel > 0.2 and trace.final_gap > target_gap:
            trace.converged = False
            trace.flags.append(
                f"inference: relative gap {trace.final_gap:.3g} misses target "
                f"{target_gap:.3g} by more than 20%"
            )
    outputs = [
        fwd.forward_pass(trained, obs, s, inc, capacities, tmin) for s in obs.samples
    ]
    return trained, outputs, trace
