"""Evaluation: error metrics, k-fold cross-validation over sensor links,
reference baselines and the equilibrium-weight sweep.

Cross-validation hides whole links (sensors) rather than samples: the model
never sees a held-out link's measurements during training, and the loss
normalizers are recomputed on the surviving observations so nothing leaks.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, replace

import numpy as np

from . import forward as fwd
from .network import IncidenceMatrices, Network
from .observations import ObservationSet
from .params import ParamSpec, initialize
from .train import TrainConfig, fit

__all__ = [
    "mape",
    "mdape",
    "mse",
    "r2",
    "FoldPlan",
    "plan_folds",
    "EvalRecord",
    "kfold",
    "baseline_historical_mean",
    "baseline_linear_regression",
    "lambda_sweep",
    "LAMBDA_GRID",
    "records_to_csv",
]

LAMBDA_GRID = (0.0, 0.001, 0.01, 0.1, 1.0, 10.0)


# ---------------------------------------------------------------------------
# metrics (pooled over entries; zero-valued observations are excluded from
# the percentage metrics because the ratio is undefined there)
# ---------------------------------------------------------------------------

def _valid(est, obs):
    est = np.asarray(est, dtype=float).ravel()
    obs = np.asarray(obs, dtype=float).ravel()
    keep = ~np.isnan(obs) & ~np.isnan(est)
    return est[keep], obs[keep]


def mape(est, obs) -> float:
    e, o = _valid(est, obs)
    nz = o != 0
    if not nz.any():
        return float("nan")
    return float(np.mean(np.abs(e[nz] - o[nz]) / np.abs(o[nz])) * 100.0)


def mdape(est, obs) -> float:
    e, o = _valid(est, obs)
    nz = o != 0
    if not nz.any():
        return float("nan")
    return float(np.median(np.abs(e[nz] - o[nz]) / np.abs(o[nz])) * 100.0)


def mse(est, obs) -> float:
    e, o = _valid(est, obs)
    if e.size == 0:
        return float("nan")
    return float(np.mean((e - o) ** 2))


def r2(est, obs) -> float:
    e, o = _valid(est, obs)
    if e.size == 0:
        return float("nan")
    ss_tot = float(np.sum((o - o.mean()) ** 2))
    if ss_tot == 0.0:
        return float("nan")
    return 1.0 - float(np.sum((e - o) ** 2)) / ss_tot


# ---------------------------------------------------------------------------
# fold planning
# ---------------------------------------------------------------------------

@dataclass
class FoldPlan:
    folds: list  # list of sorted int arrays, disjoint, covering all ids

    def __post_init__(self):
        sizes = [len(f) for f in self.folds]
        if sizes and max(sizes) - min(sizes) > 1:
            raise ValueError("fold sizes must differ by at most 1")
        flat = np.concatenate([np.asarray(f) for f in self.folds]) if self.folds else np.array([])
        if flat.size != np.unique(flat).size:
            raise ValueError("folds must be disjoint")


def plan_folds(ids, n_folds: int, seed: int = 0) -> FoldPlan:
    """Random partition of ids into n_folds near-equal disjoint folds."""
    ids = np.asarray(sorted(ids), dtype=int)
    if n_folds < 2 or n_folds > ids.size:
        raise ValueError("n_folds must be in [2, number of ids]")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(ids)
    return FoldPlan([np.sort(f) for f in np.array_split(perm, n_folds)])


# ---------------------------------------------------------------------------
# shared evaluation helpers
# ---------------------------------------------------------------------------

@dataclass
class EvalRecord:
    fold: int
    source: str  # "flow" | "time"
    scope: str  # "in" | "out"
    mape: float
    mdape: float
    mse: float
    r2: float
    n: int


def records_to_csv(records) -> str:
    buf = io.StringIO()
    buf.write("fold,source,scope,mape,mdape,mse,r2,n\n")
    for r in records:
        buf.write(f"{r.fold},{r.source},{r.scope},{r.mape!r},{r.mdape!r},"
                  f"{r.mse!r},{r.r2!r},{r.n}\n")
    return buf.getvalue()


def _pool(obs_full: ObservationSet, pred_by_period: dict, source: str,
          link_sel: np.ndarray):
    """Stack (estimate, observation) pairs over all samples for given links."""
    est, got = [], []
    for s in obs_full.samples:
        vals = s.flows if source == "flow" else s.times
        mask = (s.flow_mask if source == "flow" else s.time_mask) & link_sel
        if not mask.any():
            continue
        est.append(pred_by_period[s.period_id][mask])
        got.append(vals[mask])
    if not est:
        return np.array([]), np.array([])
    return np.concatenate(est), np.concatenate(got)


def _record(fold, source, scope, est, got) -> EvalRecord:
    return EvalRecord(
        fold=fold, source=source, scope=scope,
        mape=mape(est, got), mdape=mdape(est, got),
        mse=mse(est, got), r2=r2(est, got), n=int(got.size),
    )


def _observed_links(obs: ObservationSet, source: str, n_links: int) -> np.ndarray:
    seen = np.zeros(n_links, dtype=bool)
    for s in obs.samples:
        seen |= s.flow_mask if source == "flow" else s.time_mask
    return np.flatnonzero(seen)


def _model_predictions(params, obs, inc, capacities, tmin):
    """One forward evaluation per period; x and t do not vary within a period."""
    preds_x, preds_t = {}, {}
    for pid in obs.period_ids:
        sample = next(s for s in obs.samples if s.period_id == pid)
        out = fwd.forward_pass(params, obs, sample, inc, capacities, tmin)
        preds_x[pid] = out.x
        preds_t[pid] = out.t
    return preds_x, preds_t


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------

def kfold(net: Network, inc: IncidenceMatrices, obs: ObservationSet,
          spec: ParamSpec, config: TrainConfig, n_folds: int = 5,
          seed: int = 0):
    """Link-wise k-fold cross-validation of the model.

    Each source (flow sensors, time sensors) is partitioned into folds over
    its observed links; round ``f`` hides fold ``f`` of both sources, trains
    from a fresh initialization on the masked data and scores in-sample
    (visible links) and out-of-sample (hidden links) predictions.

    Returns ``(records, info)`` where ``info`` carries fold plans, per-fold
    final training gaps and traces.
    """
    A = inc.n_links
    plans = {
        "flow": plan_folds(_observed_links(obs, "flow", A), n_folds, seed),
        "time": plan_folds(_observed_links(obs, "time", A), n_folds, seed + 1),
    }
    records = []
    gaps, traces = [], []
    for f in range(n_folds):
        hidden = {src: plans[src].folds[f] for src in ("flow", "time")}
        train_obs = obs.masked_copy(hidden_flow_links=hidden["flow"],
                                    hidden_time_links=hidden["time"])
        params = initialize(spec, net, inc, train_obs)
        params, trace = fit(params, train_obs, config, spec, inc,
                            net.capacities, net.free_flow_times)
        gaps.append(trace.final_gap)
        traces.append(trace)
        preds_x, preds_t = _model_predictions(params, train_obs, inc,
                                              net.capacities, net.free_flow_times)
        for src, preds in (("flow", preds_x), ("time", preds_t)):
            out_sel = np.zeros(A, dtype=bool)
            out_sel[hidden[src]] = True
            in_sel = ~out_sel
            records.append(_record(f, src, "in", *_pool(obs, preds, src, in_sel)))
            records.append(_record(f, src, "out", *_pool(obs, preds, src, out_sel)))
    return records, {"plans": plans, "gaps": gaps, "traces": traces}


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

def _baseline_eval(obs, preds_by_source, plans, n_folds, A, fold, records):
    for src in ("flow", "time"):
        out_sel = np.zeros(A, dtype=bool)
        out_sel[plans[src].folds[fold]] = True
        in_sel = ~out_sel
        preds = preds_by_source[src]
        records.append(_record(fold, src, "in", *_pool(obs, preds, src, in_sel)))
        records.append(_record(fold, src, "out", *_pool(obs, preds, src, out_sel)))


def baseline_historical_mean(inc: IncidenceMatrices, obs: ObservationSet,
                             n_folds: int = 5, seed: int = 0):
    """Per-period per-link mean of the training-visible measurements.

    Links hidden in a fold fall back to the period-wide mean over the
    visible links, since their own history is unavailable by construction.
    """
    A = inc.n_links
    plans = {
        "flow": plan_folds(_observed_links(obs, "flow", A), n_folds, seed),
        "time": plan_folds(_observed_links(obs, "time", A), n_folds, seed + 1),
    }
    records = []
    for f in range(n_folds):
        train = obs.masked_copy(hidden_flow_links=plans["flow"].folds[f],
                                hidden_time_links=plans["time"].folds[f])
        preds_by_source = {}
        for src in ("flow", "time"):
            preds = {}
            for pid in obs.period_ids:
                acc = np.zeros(A)
                cnt = np.zeros(A)
                for s in train.samples:
                    if s.period_id != pid:
                        continue
                    m = s.flow_mask if src == "flow" else s.time_mask
                    vals = s.flows if src == "flow" else s.times
                    acc[m] += vals[m]
                    cnt[m] += 1.0
                seen = cnt > 0
                pred = np.full(A, acc[seen].sum() / cnt[seen].sum() if seen.any() else np.nan)
                pred[seen] = acc[seen] / cnt[seen]
                preds[pid] = pred
            preds_by_source[src] = preds
        _baseline_eval(obs, preds_by_source, plans, n_folds, A, f, records)
    return records, {"plans": plans}


def _link_features(net: Network, obs: ObservationSet, pid) -> np.ndarray:
    A = net.n_links
    Z = obs.Z.get(pid)
    cols = [np.ones(A), net.capacities, net.free_flow_times]
    if Z is not None and Z.size:
        cols.extend(Z.T)
    return np.column_stack(cols)


def baseline_linear_regression(net: Network, inc: IncidenceMatrices,
                               obs: ObservationSet, n_folds: int = 5,
                               seed: int = 0):
    """Per-period least squares of link measurements on link features.

    Features are intercept, capacity, free-flow time and the exogenous link
    attributes. Fit on the visible links of each fold with ordinary least
    squares via the normal equations; a 1e-6 ridge is added when the system
    is singular.
    """
    A = inc.n_links
    plans = {
        "flow": plan_folds(_observed_links(obs, "flow", A), n_folds, seed),
        "time": plan_folds(_observed_links(obs, "time", A), n_folds, seed + 1),
    }
    records = []
    for f in range(n_folds):
        train = obs.masked_copy(hidden_flow_links=plans["flow"].folds[f],
                                hidden_time_links=plans["time"].folds[f])
        preds_by_source = {}
        for src in ("flow", "time"):
            preds = {}
            for pid in obs.period_ids:
                X = _link_features(net, obs, pid)
                acc = np.zeros(A)
                cnt = np.zeros(A)
                for s in train.samples:
                    if s.period_id != pid:
                        continue
                    m = s.flow_mask if src == "flow" else s.time_mask
                    vals = s.flows if src == "flow" else s.times
                    acc[m] += vals[m]
                    cnt[m] += 1.0
                seen = cnt > 0
                if not seen.any():
                    preds[pid] = np.full(A, np.nan)
                    continue
                y = acc[seen] / cnt[seen]
                Xs = X[seen]
                gram = Xs.T @ Xs
                rhs = Xs.T @ y
                try:
                    coef = np.linalg.solve(gram, rhs)
                except np.linalg.LinAlgError:
                    coef = np.linalg.solve(gram + 1e-6 * np.eye(gram.shape[0]), rhs)
                preds[pid] = X @ coef
            preds_by_source[src] = preds
        _baseline_eval(obs, preds_by_source, plans, n_folds, A, f, records)
    return records, {"plans": plans}


# ---------------------------------------------------------------------------
# equilibrium-weight sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepRecord:
    lam: float
    mse_out_flow: float
    mean_train_gap: float
    records: list


def lambda_sweep(net: Network, inc: IncidenceMatrices, obs: ObservationSet,
                 spec: ParamSpec, config: TrainConfig, grid=LAMBDA_GRID,
                 n_folds: int = 5, seed: int = 0):
    """Cross-validate over the equilibrium-loss weight grid.

    For each weight value, runs the k-fold protocol and reports the mean
    out-of-sample flow MSE and the mean final training gap across folds.
    """
    results = []
    for lam in grid:
        cfg = replace(config, weights=replace(config.weights, le=float(lam)))
        records, info = kfold(net, inc, obs, spec, cfg, n_folds=n_folds, seed=seed)
        out_flow = [r.mse for r in records if r.source == "flow" and r.scope == "out"]
        results.append(SweepRecord(
            lam=float(lam),
            mse_out_flow=float(np.mean(out_flow)),
            mean_train_gap=float(np.mean([g for g in info["gaps"] if g == g])),
            records=records,
        ))
    return results
