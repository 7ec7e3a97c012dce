"""Observed samples of link flows and travel times with missingness masks.

A sample is one snapshot of the network (a day x period combination).
Missing measurements are stored as NaN; per-sample counts and standard
deviations over the non-missing entries feed the loss normalizers.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

__all__ = ["Sample", "ObservationSet", "observations_to_csv", "observations_from_csv"]


@dataclass
class Sample:
    sample_id: int
    period_id: int
    flows: np.ndarray  # |A|, NaN where unobserved
    times: np.ndarray  # |A|, NaN where unobserved

    def __post_init__(self):
        self.flows = np.asarray(self.flows, dtype=float)
        self.times = np.asarray(self.times, dtype=float)
        if np.nanmin(self.flows, initial=0.0) < 0 or np.nanmin(self.times, initial=0.0) < 0:
            raise ValueError("observed flows/times must be nonnegative")
        self.flow_mask = ~np.isnan(self.flows)
        self.time_mask = ~np.isnan(self.times)
        self.refresh_stats()

    def refresh_stats(self):
        """Recompute non-missing counts and dispersions (population std)."""
        self.n_x = int(self.flow_mask.sum())
        self.n_t = int(self.time_mask.sum())
        self.sigma_x = float(np.std(self.flows[self.flow_mask])) if self.n_x else 0.0
        self.sigma_t = float(np.std(self.times[self.time_mask])) if self.n_t else 0.0


@dataclass
class ObservationSet:
    """A list of samples plus exogenous features and optional references.

    ``Z`` maps period_id -> |A| x |K_Z| route-choice features and ``O`` maps
    period_id -> |V| x |K_O| generation features (shared within a period).
    ``ref_generation`` / ``ref_od`` optionally give per-period reference
    trip-generation and O-D vectors.
    """

    samples: list
    Z: dict = field(default_factory=dict)
    O: dict = field(default_factory=dict)
    ref_generation: dict = field(default_factory=dict)
    ref_od: dict = field(default_factory=dict)

    def __post_init__(self):
        self.period_ids = sorted({s.period_id for s in self.samples})
        self.period_index = {p: i for i, p in enumerate(self.period_ids)}

    @property
    def n_samples(self) -> int:
        return len(self.samples)

    @property
    def n_periods(self) -> int:
        return len(self.period_ids)

    def Z_for(self, sample: Sample, n_links: int, n_features: int = 0):
        z = self.Z.get(sample.period_id)
        if z is None:
            return np.zeros((n_links, n_features))
        return z

    def O_for(self, sample: Sample, n_nodes: int, n_features: int = 0):
        o = self.O.get(sample.period_id)
        if o is None:
            return np.zeros((n_nodes, n_features))
        return o

    def masked_copy(self, hidden_flow_links=None, hidden_time_links=None) -> "ObservationSet":
        """Copy with the given link ids treated as missing (per source).

        Counts and sigmas are recomputed on the surviving observations, so
        hidden entries cannot leak through the loss normalizers.
        """
        hf = np.sort(np.asarray(
            [] if hidden_flow_links is None else hidden_flow_links, dtype=int))
        ht = np.sort(np.asarray(
            [] if hidden_time_links is None else hidden_time_links, dtype=int))
        masked = []
        for s in self.samples:
            flows = s.flows.copy()
            times = s.times.copy()
            if hf.size:
                flows[hf] = np.nan
            if ht.size:
                times[ht] = np.nan
            masked.append(Sample(s.sample_id, s.period_id, flows, times))
        return ObservationSet(
            samples=masked,
            Z=self.Z,
            O=self.O,
            ref_generation=self.ref_generation,
            ref_od=self.ref_od,
        )


def observations_to_csv(obs: ObservationSet) -> str:
    buf = io.StringIO()
    buf.write("sample_id,period_id,link_id,flow,travel_time\n")
    for s in obs.samples:
        for a in range(s.flows.size):
            fx = "" if np.isnan(s.flows[a]) else repr(float(s.flows[a]))
            ft = "" if np.isnan(s.times[a]) else repr(float(s.times[a]))
            if fx or ft:
                buf.write(f"{s.sample_id},{s.period_id},{a},{fx},{ft}\n")
    return buf.getvalue()


def observations_from_csv(text: str, n_links: int) -> ObservationSet:
    rows = text.strip().splitlines()
    data = {}
    for line in rows[1:]:
        sid, pid, lid, fx, ft = line.split(",")
        key = (sid, pid)  # ids stay strings; ordering is lexicographic
        flows, times = data.setdefault(
            key, (np.full(n_links, np.nan), np.full(n_links, np.nan))
        )
        a = int(lid)
        if fx:
            flows[a] = float(fx)
        if ft:
            times[a] = float(ft)
    samples = [
        Sample(sid, pid, flows, times)
        for (sid, pid), (flows, times) in sorted(data.items())
    ]
    return ObservationSet(samples=samples)


def features_to_csv(feature_map: dict, kind: str) -> str:
    """Serialize a period -> matrix feature map as long-form CSV."""
    buf = io.StringIO()
    buf.write("period_id,entity_id,feature,value\n")
    for pid, mat in sorted(feature_map.items()):
        mat = np.asarray(mat)
        for e in range(mat.shape[0]):
            for k in range(mat.shape[1]):
                buf.write(f"{pid},{e},{kind}{k},{float(mat[e, k])!r}\n")
    return buf.getvalue()


def features_from_csv(text: str, n_entities: int) -> dict:
    rows = text.strip().splitlines()
    staged = {}
    for line in rows[1:]:
        pid, eid, feat, val = line.split(",")
        staged.setdefault(pid, {}).setdefault(feat, {})[int(eid)] = float(val)
    out = {}
    for pid, feats in staged.items():
        names = sorted(feats)
        mat = np.zeros((n_entities, len(names)))
        for k, name in enumerate(names):
            for e, v in feats[name].items():
                mat[e, k] = v
        out[pid] = mat
    return out
