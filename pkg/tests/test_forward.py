"""Forward chain against loop-based oracles, plus structural properties."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mate import forward as fwd
from mate.network import build_incidences
from mate.observations import ObservationSet, Sample
from mate.params import ModelParams

from conftest import naive_blockwise_softmax, naive_forward, random_instance


class TestBlockwiseSoftmax:
    def test_matches_naive(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            sizes = rng.integers(1, 6, rng.integers(1, 5))
            labels = np.repeat(np.arange(sizes.size), sizes)
            vals = rng.normal(0, 5, labels.size)
            assert np.allclose(
                fwd.blockwise_softmax(vals, labels),
                naive_blockwise_softmax(vals, labels),
                rtol=1e-13, atol=1e-15,
            )

    @settings(max_examples=100, deadline=None)
    @given(hnp.arrays(np.float64, st.integers(1, 12),
                      elements=st.floats(-700, 700, allow_nan=False)),
           st.integers(1, 4))
    def test_properties(self, vals, nblocks):
        nblocks = min(nblocks, vals.size)
        edges = np.linspace(0, vals.size, nblocks + 1).astype(int)
        labels = np.repeat(np.arange(nblocks), np.diff(edges))
        p = fwd.blockwise_softmax(vals, labels)
        assert (p >= 0).all() and (p <= 1).all()
        sums = np.bincount(labels, weights=p)
        assert np.allclose(sums, 1.0, rtol=0, atol=1e-12)
        # invariance under a per-block shift
        shift = np.arange(1, nblocks + 1, dtype=float)[labels] * 7.5
        p2 = fwd.blockwise_softmax(vals + shift, labels)
        assert np.allclose(p, p2, rtol=1e-9, atol=1e-12)

    def test_extreme_values_stay_finite(self):
        labels = np.zeros(3, dtype=np.int64)
        p = fwd.blockwise_softmax(np.array([1e4, -1e4, 0.0]), labels)
        assert np.all(np.isfinite(p))
        assert p.sum() == pytest.approx(1.0, abs=1e-12)


class TestForwardAgainstOracle:
    @pytest.mark.parametrize("seed", range(12))
    def test_all_layers(self, seed):
        net, ps, inc, obs, sample, params = random_instance(seed)
        out = fwd.forward_pass(params, obs, sample, inc,
                               net.capacities, net.free_flow_times)
        want = naive_forward(params, obs, sample, net, ps, inc)
        for key in ("t_tilde", "v", "p", "g", "phi", "q", "f", "x", "t"):
            assert np.allclose(getattr(out, key), want[key],
                               rtol=1e-10, atol=1e-12), key

    @pytest.mark.parametrize("mode", ["diagonal", "upstream_downstream"])
    def test_interaction_modes_against_oracle(self, mode):
        net, ps, inc, obs, sample, params = random_instance(31, interaction=mode)
        out = fwd.forward_pass(params, obs, sample, inc,
                               net.capacities, net.free_flow_times)
        want = naive_forward(params, obs, sample, net, ps, inc)
        assert np.allclose(out.t, want["t"], rtol=1e-10)


class TestStructuralProperties:
    @pytest.mark.parametrize("seed", range(8))
    def test_conservation_and_bounds(self, seed):
        net, ps, inc, obs, sample, params = random_instance(100 + seed)
        out = fwd.forward_pass(params, obs, sample, inc,
                               net.capacities, net.free_flow_times)
        # path flows of one O-D pair resum to its demand
        q_back = np.asarray(inc.M @ out.f)
        assert np.allclose(q_back, out.q, rtol=1e-9, atol=1e-9)
        # O-D flows of one origin resum to its generation (only origins that
        # actually have O-D pairs route their generation anywhere)
        g_back = np.asarray(inc.L @ out.q)
        has_od = np.asarray(inc.L.sum(axis=1)).ravel() > 0
        assert np.allclose(g_back[has_od], out.g[has_od], rtol=1e-9, atol=1e-9)
        assert (out.t >= net.free_flow_times - 1e-12).all()
        assert (out.t_tilde >= net.free_flow_times - 1e-12).all()

    def test_zero_flow_gives_free_flow_times(self):
        net, ps, inc, obs, sample, params = random_instance(42)
        params.delta[...] = 0.0
        params.kappa[...] = 0.0
        obs.O["p0"][...] = 0.0
        out = fwd.forward_pass(params, obs, sample, inc,
                               net.capacities, net.free_flow_times)
        assert (out.x == 0).all()
        assert np.array_equal(out.t, net.free_flow_times)

    def test_bpr_equivalence(self):
        # diagonal interaction with unit kernel and beta = (0,0,0,a) is the
        # standard quartic volume-delay function
        net, ps, inc, obs, sample, params = random_instance(5, interaction="diagonal")
        a = 0.15
        params.beta = np.array([0.0, 0.0, 0.0, a])
        params.w = np.ones(inc.e_rows.size)
        out = fwd.forward_pass(params, obs, sample, inc,
                               net.capacities, net.free_flow_times)
        want = net.free_flow_times * (1 + a * (out.x / net.capacities) ** 4)
        assert np.allclose(out.t, want, rtol=1e-12)

    def test_nonfinite_raises_named_layer(self):
        net, ps, inc, obs, sample, params = random_instance(6)
        params.xhat[...] = 1e308
        with pytest.raises(fwd.NumericError):
            fwd.forward_pass(params, obs, sample, inc,
                             net.capacities, net.free_flow_times)


class TestRelativeGap:
    def test_values(self):
        x = np.array([2.0, 2.0])
        assert fwd.relative_gap(x, x) == 0.0
        assert fwd.relative_gap(x, np.array([1.0, 1.0])) == pytest.approx(0.5)
        assert np.isnan(fwd.relative_gap(np.zeros(2), np.ones(2)))


class TestLoss:
    def _setup(self, seed=0):
        net, ps, inc, obs, sample, params = random_instance(seed)
        out = fwd.forward_pass(params, obs, sample, inc,
                               net.capacities, net.free_flow_times)
        return net, inc, obs, sample, params, out

    def test_matches_manual_formula(self):
        net, inc, obs, sample, params, out = self._setup(21)
        weights = fwd.LossWeights(lx=2.0, lt=0.5, le=1.5, lg=0.3, lq=0.7)
        rep = fwd.loss(out, params, obs, weights, sample)
        m = sample.flow_mask
        want_lx = np.sum((out.x[m] - sample.flows[m]) ** 2) / (sample.n_x * sample.sigma_x)
        m = sample.time_mask
        want_lt = np.sum((out.t[m] - sample.times[m]) ** 2) / (sample.n_t * sample.sigma_t)
        want_le = np.sum((out.x - params.xhat[0]) ** 2) / (out.x.size * sample.sigma_x)
        want_lg = np.sum((out.g - obs.ref_generation["p0"]) ** 2)
        want_lq = np.sum((out.q - obs.ref_od["p0"]) ** 2)
        assert rep.lx == pytest.approx(want_lx, rel=1e-12)
        assert rep.lt == pytest.approx(want_lt, rel=1e-12)
        assert rep.le == pytest.approx(want_le, rel=1e-12)
        assert rep.lg == pytest.approx(want_lg, rel=1e-12)
        assert rep.lq == pytest.approx(want_lq, rel=1e-12)
        assert rep.total == pytest.approx(
            2.0 * want_lx + 0.5 * want_lt + 1.5 * want_le
            + 0.3 * want_lg + 0.7 * want_lq, rel=1e-12)

    def test_degenerate_normalizer_falls_back(self):
        net, inc, obs, sample, params, out = self._setup(22)
        empty = Sample("e", "p0", np.full(net.n_links, np.nan),
                       np.full(net.n_links, np.nan))
        obs2 = ObservationSet([empty], Z=obs.Z, O=obs.O)
        out2 = fwd.forward_pass(params, obs2, empty, inc,
                                net.capacities, net.free_flow_times)
        rep = fwd.loss(out2, params, obs2, fwd.LossWeights(), empty)
        assert rep.lx == 0.0 and rep.lt == 0.0
        assert any("fallback" in f or "contributes 0" in f for f in rep.flags)
        assert np.isfinite(rep.total)

    def test_mape_excludes_zero_observations(self):
        est = np.array([1.0, 2.0, 3.0])
        obs_vals = np.array([0.0, 4.0, np.nan])
        mask = ~np.isnan(obs_vals)
        # only the middle entry counts: |2-4|/4 = 50%
        assert fwd._mape(est, obs_vals, mask) == pytest.approx(50.0)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            fwd.LossWeights(lx=-1.0)
