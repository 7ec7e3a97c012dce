"""Learnable parameter containers, initialization and feasibility projection.

Parameter groups and shapes (T = number of periods, A links, V nodes,
W O-D pairs, b polynomial degree, K_Z / K_O feature counts):

====== =============== ==========================================
group  shape           meaning
====== =============== ==========================================
xhat   (T, A)          auxiliary link-flow parameters [veh/h]
theta  (T, 1 + K_Z)    utility weights, column 0 = travel time
gamma  (A,)            link-specific utility effects
w      (nnz(E),)       interaction kernel values on the mask support
beta   (b,)            polynomial coefficients
kappa  (T, K_O)        generation feature weights
delta  (T, V)          generation location effects
omega  (T, W)          destination-specific utilities
====== =============== ==========================================

Samples collected in the same period share one parameter slice; w, beta
and gamma are period-invariant.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .network import IncidenceMatrices, Network

__all__ = [
    "GroupSpec",
    "ParamSpec",
    "ModelParams",
    "default_spec",
    "initialize",
    "project",
    "checkpoint_dumps",
    "checkpoint_loads",
]

GROUPS = ("xhat", "theta", "gamma", "w", "beta", "kappa", "delta", "omega")

W_DIAG_FLOOR = 1e-6
W_UPPER = 10.0
BETA_UPPER = 10.0


@dataclass
class GroupSpec:
    trainable: bool = True
    lower: float = -np.inf
    upper: float = np.inf
    lr_mult: float | np.ndarray = 1.0
    init: float | np.ndarray | None = None

    def __post_init__(self):
        lo = np.min(self.lower) if np.ndim(self.lower) else self.lower
        hi = np.max(self.upper) if np.ndim(self.upper) else self.upper
        if lo > hi:
            raise ValueError("inconsistent bounds: lower > upper")


@dataclass
class ParamSpec:
    """Per-group trainability, box bounds, learning-rate multipliers.

    ``theta_signs`` optionally constrains utility-weight columns: -1 keeps a
    column nonpositive (violations projected to zero), +1 nonnegative,
    0 unconstrained.
    """

    groups: dict = field(default_factory=dict)
    theta_signs: np.ndarray | None = None
    n_poly: int = 3
    n_z_features: int = 0
    n_o_features: int = 0

    def group(self, name: str) -> GroupSpec:
        if name not in GROUPS:
            raise KeyError(f"unknown parameter group {name!r}")
        return self.groups.setdefault(name, GroupSpec())


def default_spec(n_z_features: int = 0, n_o_features: int = 0, n_poly: int = 3,
                 capacities: np.ndarray | None = None) -> ParamSpec:
    """Spec with the standard constraints and scale-aware learning rates.

    Link-flow parameters live in vehicle units, so their effective learning
    rate is scaled by link capacity; generation location effects get a 10x
    multiplier for the same reason.
    """
    spec = ParamSpec(n_poly=n_poly, n_z_features=n_z_features, n_o_features=n_o_features)
    spec.groups["xhat"] = GroupSpec(
        lower=0.0, lr_mult=capacities.copy() if capacities is not None else 1.0
    )
    spec.groups["theta"] = GroupSpec(init=-1.0)
    spec.groups["gamma"] = GroupSpec(init=0.0)
    spec.groups["w"] = GroupSpec(lower=0.0, upper=W_UPPER, init=1.0)
    spec.groups["beta"] = GroupSpec(lower=0.0, upper=BETA_UPPER, init=1.0)
    spec.groups["kappa"] = GroupSpec(init=0.0)
    spec.groups["delta"] = GroupSpec(lr_mult=10.0)
    spec.groups["omega"] = GroupSpec(init=0.0)
    return spec


@dataclass
class ModelParams:
    xhat: np.ndarray
    theta: np.ndarray
    gamma: np.ndarray
    w: np.ndarray  # values on the E support, aligned with inc.e_rows/e_cols
    beta: np.ndarray
    kappa: np.ndarray
    delta: np.ndarray
    omega: np.ndarray
    period_ids: list = field(default_factory=list)

    def __post_init__(self):
        for name in GROUPS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        self.period_index = {p: i for i, p in enumerate(self.period_ids)}

    @property
    def n_periods(self) -> int:
        return self.xhat.shape[0]

    def slice_for(self, period_id) -> int:
        return self.period_index[period_id]

    def copy(self) -> "ModelParams":
        return ModelParams(
            *(getattr(self, g).copy() for g in GROUPS), period_ids=list(self.period_ids)
        )

    def groups_dict(self) -> dict:
        return {g: getattr(self, g) for g in GROUPS}

    def w_dense(self, inc: IncidenceMatrices) -> np.ndarray:
        A = inc.n_links
        W = np.zeros((A, A))
        W[inc.e_rows, inc.e_cols] = self.w
        return W

    def check_invariants(self, inc: IncidenceMatrices) -> None:
        if np.any(self.xhat < 0):
            raise ValueError("xhat must be nonnegative")
        if np.any(self.beta < 0) or np.any(self.beta > BETA_UPPER):
            raise ValueError("beta out of bounds")
        if np.any(self.w < 0) or np.any(self.w > W_UPPER):
            raise ValueError("w out of bounds")
        if np.any(self.w[inc.e_diag] <= 0):
            raise ValueError("diagonal of the interaction kernel must be positive")


def _filled(shape, spec_init, default):
    arr = np.full(shape, default, dtype=float)
    if spec_init is not None:
        arr[...] = spec_init
    return arr


def initialize(spec: ParamSpec, net: Network, inc: IncidenceMatrices, obs,
               refs: dict | None = None) -> ModelParams:
    """Feasible starting point for training.

    Location effects come from the reference generation when available
    (``refs["generation"]`` or ``obs.ref_generation``), destination
    utilities start at zero (even split over reachable destinations), the
    kernel starts at one on the mask support, and the link-flow parameters
    are set by a single logit assignment pass at free-flow travel times.
    """
    from .train import assign_stalogit  # deferred: train imports forward

    A, V, W = inc.n_links, inc.n_nodes, inc.n_od
    T = obs.n_periods
    refs = refs or {}
    ref_g = refs.get("generation", obs.ref_generation)

    theta = _filled((T, 1 + spec.n_z_features), spec.group("theta").init, -1.0)
    gamma = _filled((A,), spec.group("gamma").init, 0.0)
    w = _filled((inc.e_rows.size,), spec.group("w").init, 1.0)
    beta = _filled((spec.n_poly,), spec.group("beta").init, 1.0)
    kappa = _filled((T, spec.n_o_features), spec.group("kappa").init, 0.0)
    omega = _filled((T, W), spec.group("omega").init, 0.0)

    delta = np.zeros((T, V))
    dspec = spec.group("delta")
    if dspec.init is not None:
        delta[...] = dspec.init
    for pid, t_idx in obs.period_index.items():
        if pid in ref_g:
            delta[t_idx] = np.asarray(ref_g[pid], dtype=float)
        elif dspec.init is None:
            # no reference demand: seed every location with the period's mean
            # observed flow so training starts from nonzero generation
            vals = [s.flows[s.flow_mask] for s in obs.samples
                    if s.period_id == pid and s.n_x]
            delta[t_idx] = float(np.mean(np.concatenate(vals))) if vals else 1.0

    params = ModelParams(
        xhat=np.zeros((T, A)), theta=theta, gamma=gamma, w=w, beta=beta,
        kappa=kappa, delta=delta, omega=omega, period_ids=list(obs.period_ids),
    )

    # one STALOGIT pass at free-flow times, with demand implied by the
    # initialized generation/destination layers
    tmin = net.free_flow_times
    for pid, t_idx in obs.period_index.items():
        O = obs.O.get(pid, np.zeros((V, spec.n_o_features)))
        Z = obs.Z.get(pid, np.zeros((A, spec.n_z_features)))
        g = np.maximum(0.0, O @ kappa[t_idx] + delta[t_idx])
        from .forward import destination_probabilities, od_flows

        phi = destination_probabilities(omega[t_idx], inc)
        q = od_flows(g, phi, inc)
        params.xhat[t_idx] = assign_stalogit(
            inc, q, theta[t_idx], gamma, Z, tmin
        )
    return project(params, spec, inc)


def project(params: ModelParams, spec: ParamSpec, inc: IncidenceMatrices) -> ModelParams:
    """Componentwise projection onto the feasible box; idempotent."""
    out = params.copy()
    for name in GROUPS:
        gs = spec.group(name)
        arr = getattr(out, name)
        np.clip(arr, gs.lower, gs.upper, out=arr)
    np.clip(out.beta, 0.0, BETA_UPPER, out=out.beta)
    np.clip(out.w, 0.0, W_UPPER, out=out.w)
    out.w[inc.e_diag] = np.clip(out.w[inc.e_diag], W_DIAG_FLOOR, W_UPPER)
    np.clip(out.xhat, 0.0, None, out=out.xhat)
    if spec.theta_signs is not None:
        signs = np.asarray(spec.theta_signs)
        for k, s in enumerate(signs):
            col = out.theta[:, k]
            if s < 0:
                col[col > 0] = 0.0
            elif s > 0:
                col[col < 0] = 0.0
    return out


def checkpoint_dumps(params: ModelParams) -> str:
    payload = {
        "period_ids": list(params.period_ids),
        "groups": {
            g: {"shape": list(getattr(params, g).shape),
                "values": getattr(params, g).ravel().tolist()}
            for g in GROUPS
        },
    }
    return json.dumps(payload)


def checkpoint_loads(text: str) -> ModelParams:
    payload = json.loads(text)
    arrays = {}
    for g in GROUPS:
        entry = payload["groups"][g]
        arrays[g] = np.array(entry["values"], dtype=float).reshape(entry["shape"])
    return ModelParams(**arrays, period_ids=payload["period_ids"])
