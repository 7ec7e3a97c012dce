"""Synthetic data generation and the bundled benchmark network.

Ground-truth link flows come from a damped fixed-point iteration of the
logit assignment map, solved to a tight relative gap so that downstream
recovery experiments have a well-defined target. Observed samples are the
equilibrium state plus truncated Gaussian measurement noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .forward import relative_gap
from .network import (
    IncidenceMatrices,
    Network,
    PathSet,
    build_incidences,
    k_shortest_paths,
    parse_tntp,
)
from .observations import ObservationSet, Sample
from .params import ModelParams, checkpoint_dumps
from .train import assign_stalogit

__all__ = [
    "PeriodSpec",
    "SyntheticSpec",
    "SyntheticData",
    "generate",
    "solve_fixed_point",
    "ground_truth_json",
    "load_sioux_falls",
]


@dataclass
class PeriodSpec:
    period_id: str
    demand_scale: float
    n_samples: int


@dataclass
class SyntheticSpec:
    periods: list = field(default_factory=lambda: [
        PeriodSpec("peak", 1.0, 200),
        PeriodSpec("offpeak", 0.8, 100),
    ])
    k_paths: int = 3
    theta: tuple = (-1.0, -1.3, -3.0)  # travel time + exogenous features
    bpr_alpha: float = 0.15
    bpr_power: int = 4
    od_noise: float = 0.10  # sd as fraction of the mean O-D entry
    measurement_noise: float = 0.05  # sd as fraction of the mean flow / time
    gap_tol: float = 1e-6
    max_iters: int = 20000
    damping: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not self.periods:
            raise ValueError("at least one period is required")
        if self.od_noise < 0 or self.measurement_noise < 0:
            raise ValueError("noise levels must be nonnegative")


@dataclass
class SyntheticData:
    net: Network
    path_set: PathSet
    inc: IncidenceMatrices
    obs: ObservationSet
    truth: ModelParams
    x_true: dict  # period_id -> equilibrium link flows
    t_true: dict  # period_id -> equilibrium link times
    q_true: dict  # period_id -> O-D flows
    gap: dict  # period_id -> certified relative gap of the fixed point


def solve_fixed_point(inc: IncidenceMatrices, q: np.ndarray, theta: np.ndarray,
                      gamma: np.ndarray, Z: np.ndarray, beta: np.ndarray,
                      w: np.ndarray, capacities: np.ndarray, tmin: np.ndarray,
                      tol: float = 1e-6, max_iters: int = 20000,
                      damping: float = 0.5):
    """Damped iteration x <- (1-a) x + a T(x) of the assignment map.

    T loads the demand with a logit path choice at the congested times
    implied by x. The damping factor adapts: it shrinks whenever the gap
    grows (the map is expansive under heavy congestion) and recovers slowly
    otherwise. Returns (x, gap); the gap certifies |T(x) - x| relative to
    |x| in the L1 sense.
    """
    from .forward import performance_times, polynomial_kernel

    def times_of(x):
        return performance_times(polynomial_kernel(x, beta, capacities), w, inc, tmin)

    x = assign_stalogit(inc, q, theta, gamma, Z, tmin)
    if np.abs(x).sum() == 0.0:
        return x, 0.0
    a = damping
    gap_prev = np.inf
    gap = np.inf
    for _ in range(max_iters):
        target = assign_stalogit(inc, q, theta, gamma, Z, times_of(x))
        gap = relative_gap(target, x)
        if gap <= tol:
            return x, gap
        a = max(a * 0.5, 1e-4) if gap > gap_prev else min(a * 1.05, 1.0)
        gap_prev = gap
        x = (1.0 - a) * x + a * target
    return x, gap


def generate(net: Network, od_table: dict, spec: SyntheticSpec | None = None) -> SyntheticData:
    """Build a full synthetic observation set from a network and O-D table.

    Per period the base demand is scaled and perturbed once with Gaussian
    noise, the equilibrium is solved tightly, and ``n_samples`` noisy
    measurements of it are drawn. The returned ground-truth parameters
    reproduce the equilibrium exactly through the forward chain when paired
    with the returned (diagonal-interaction) incidences.
    """
    spec = spec or SyntheticSpec()
    rng = np.random.default_rng(spec.seed)

    internal = sorted(
        ((net.node_index(o), net.node_index(d)), trips)
        for (o, d), trips in od_table.items()
    )
    od_pairs = [pair for pair, _ in internal]
    base_q = np.array([trips for _, trips in internal], dtype=float)
    ps = k_shortest_paths(net, od_pairs, spec.k_paths)
    inc = build_incidences(net, ps, interaction="diagonal")

    capacities = net.capacities
    tmin = net.free_flow_times
    A = inc.n_links
    n_z = len(spec.theta) - 1
    Z = rng.uniform(0.0, 1.0, size=(A, n_z))
    theta = np.asarray(spec.theta, dtype=float)
    gamma = np.zeros(A)
    beta = np.zeros(spec.bpr_power)
    beta[spec.bpr_power - 1] = spec.bpr_alpha
    w = np.ones(inc.e_rows.size)  # identity interaction: own flow only

    period_ids = [p.period_id for p in spec.periods]
    T = len(period_ids)
    samples = []
    x_true, t_true, q_true, gap_cert = {}, {}, {}, {}
    ref_generation, ref_od, z_map = {}, {}, {}
    xhat = np.zeros((T, A))
    delta = np.zeros((T, inc.n_nodes))
    omega = np.zeros((T, inc.n_od))

    for ti, per in enumerate(spec.periods):
        noise = rng.normal(0.0, spec.od_noise * base_q.mean(), size=base_q.size)
        q = np.maximum(0.0, per.demand_scale * (base_q + noise))
        g = inc.L @ q
        denom = inc.L.T @ g
        phi = np.divide(q, denom, out=np.zeros_like(q), where=denom > 0)
        x, gap = solve_fixed_point(
            inc, q, theta, gamma, Z, beta, w, capacities, tmin,
            tol=spec.gap_tol, max_iters=spec.max_iters, damping=spec.damping,
        )
        from .forward import performance_times, polynomial_kernel
        t = performance_times(polynomial_kernel(x, beta, capacities), w, inc, tmin)

        x_true[per.period_id] = x
        t_true[per.period_id] = t
        q_true[per.period_id] = q
        gap_cert[per.period_id] = gap
        ref_generation[per.period_id] = g
        ref_od[per.period_id] = q
        z_map[per.period_id] = Z
        xhat[ti] = x
        delta[ti] = g
        # log of the destination shares; softmax recovers them exactly
        with np.errstate(divide="ignore"):
            omega[ti] = np.where(phi > 0, np.log(np.maximum(phi, 1e-300)), -700.0)

        sd_x = spec.measurement_noise * x.mean()
        sd_t = spec.measurement_noise * t.mean()
        for s in range(per.n_samples):
            flows = x + (rng.normal(0.0, sd_x, size=A) if sd_x > 0 else 0.0)
            times = t + (rng.normal(0.0, sd_t, size=A) if sd_t > 0 else 0.0)
            samples.append(Sample(
                sample_id=f"{per.period_id}-{s:04d}",
                period_id=per.period_id,
                flows=np.maximum(0.0, flows),
                times=np.maximum(tmin, times),
            ))

    truth = ModelParams(
        xhat=xhat,
        theta=np.tile(theta, (T, 1)),
        gamma=gamma.copy(),
        w=w.copy(),
        beta=beta.copy(),
        kappa=np.zeros((T, 0)),
        delta=delta,
        omega=omega,
        period_ids=period_ids,
    )
    obs = ObservationSet(
        samples=samples, Z=z_map, O={},
        ref_generation=ref_generation, ref_od=ref_od,
    )
    return SyntheticData(
        net=net, path_set=ps, inc=inc, obs=obs, truth=truth,
        x_true=x_true, t_true=t_true, q_true=q_true, gap=gap_cert,
    )


def ground_truth_json(data: SyntheticData) -> str:
    """Serialize the ground truth (params, equilibrium state, certificates)."""
    payload = {
        "params": json.loads(checkpoint_dumps(data.truth)),
        "x_true": {k: [float(v) for v in arr] for k, arr in data.x_true.items()},
        "t_true": {k: [float(v) for v in arr] for k, arr in data.t_true.items()},
        "q_true": {k: [float(v) for v in arr] for k, arr in data.q_true.items()},
        "gap": {k: float(v) for k, v in data.gap.items()},
    }
    return json.dumps(payload)


def load_sioux_falls():
    """Parse the bundled 24-node / 76-link benchmark network and O-D table."""
    pkg = resources.files("mate.data")
    net_text = (pkg / "SiouxFalls_net.tntp").read_text()
    trips_text = (pkg / "SiouxFalls_trips.tntp").read_text()
    return parse_tntp(net_text, trips_text)
