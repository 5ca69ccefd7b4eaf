import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualnorm.errors import ConfigurationError, NumericalError
from dualnorm.normcore import (BranchTag, NormConfig, NormKind,
                               NormLayerState, NormMode, NormStats,
                               normalize_forward, select_params,
                               update_running)

KINDS = [NormKind.BATCH, NormKind.LAYER, NormKind.GROUP, NormKind.INSTANCE]


def scalar_oracle(x, kind, eps, gamma, beta, groups=2, mean=None, var=None):
    """Brute-force normalization: explicit python loops, no vectorization."""
    n, c = x.shape[:2]
    out = np.empty_like(x)
    x2 = x.reshape(n, c, -1)
    o2 = out.reshape(n, c, -1)
    p = x2.shape[2]

    def norm_group(values):
        if mean is None:
            m = sum(values) / len(values)
            v = sum((t - m) ** 2 for t in values) / len(values)
        else:
            m, v = None, None  # per-channel running stats handled below
        return m, v

    if kind is NormKind.BATCH:
        for ci in range(c):
            vals = [x2[ni, ci, pi] for ni in range(n) for pi in range(p)]
            if mean is None:
                m, v = norm_group(vals)
            else:
                m, v = mean[ci], var[ci]
            for ni in range(n):
                for pi in range(p):
                    xh = (x2[ni, ci, pi] - m) / np.sqrt(v + eps)
                    o2[ni, ci, pi] = xh * gamma[ci] + beta[ci]
        return out
    if kind is NormKind.LAYER:
        slices = [(ni, range(c)) for ni in range(n)]
    elif kind is NormKind.INSTANCE:
        slices = None
    else:
        slices = None
    for ni in range(n):
        if kind is NormKind.LAYER:
            chans = [list(range(c))]
        elif kind is NormKind.INSTANCE:
            chans = [[ci] for ci in range(c)]
        else:  # GROUP
            size = c // groups
            chans = [list(range(g * size, (g + 1) * size)) for g in range(groups)]
        for group in chans:
            vals = [x2[ni, ci, pi] for ci in group for pi in range(p)]
            m, v = norm_group(vals)
            for ci in group:
                for pi in range(p):
                    xh = (x2[ni, ci, pi] - m) / np.sqrt(v + eps)
                    o2[ni, ci, pi] = xh * gamma[ci] + beta[ci]
    return out


def make_state(kind=NormKind.BATCH, mode=NormMode.SINGLE, channels=4,
               eps=1e-5, groups=2, dtype=np.float64):
    cfg = NormConfig(kind=kind, mode=mode, eps=eps, group_count=groups)
    return NormLayerState(channels, cfg, dtype=dtype)


class TestOracleEquivalence:
    @pytest.mark.parametrize("kind", KINDS)
    def test_train_mode_matches_scalar_loop(self, kind, rng):
        for trial in range(25):
            n = int(rng.integers(2, 5))
            c = int(rng.integers(1, 4)) * 2
            h = int(rng.integers(2, 5))
            st_ = make_state(kind=kind, channels=c)
            for ap in st_.affine:
                ap.gamma[:] = rng.normal(1.0, 0.3, c)
                ap.beta[:] = rng.normal(0.0, 0.3, c)
            x = rng.normal(0, 2, (n, c, h, h))
            got = normalize_forward(st_, x, BranchTag.CLEAN, train_mode=True)
            want = scalar_oracle(x, kind, st_.config.eps,
                                 st_.affine[0].gamma, st_.affine[0].beta)
            np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-9)

    def test_eval_mode_uses_running_stats(self, rng):
        st_ = make_state()
        c = st_.channels
        st_.stats[0] = NormStats(rng.normal(0, 1, c), rng.uniform(0.5, 2, c))
        x = rng.normal(0, 1, (3, c, 4, 4))
        got = normalize_forward(st_, x, BranchTag.CLEAN, train_mode=False)
        want = scalar_oracle(x, NormKind.BATCH, st_.config.eps,
                             st_.affine[0].gamma, st_.affine[0].beta,
                             mean=st_.stats[0].mean, var=st_.stats[0].var)
        np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-9)

    def test_known_values_single_channel(self):
        # batch {1,2,3}: population variance 2/3
        st_ = make_state(channels=1, eps=0.0 + 1e-300)
        x = np.array([1.0, 2.0, 3.0]).reshape(3, 1)
        y = normalize_forward(st_, x, BranchTag.CLEAN, train_mode=True)
        np.testing.assert_allclose(
            y.ravel(), [-1.224745, 0.0, 1.224745], atol=1e-6)

    def test_constant_input_gives_beta(self, rng):
        st_ = make_state(channels=3)
        st_.affine[0].gamma[:] = rng.normal(0, 2, 3)
        st_.affine[0].beta[:] = [0.5, -1.5, 2.0]
        x = np.ones((4, 3, 2, 2)) * np.array([3.0, -2.0, 0.0])[None, :, None, None]
        y = st_.forward(x, BranchTag.CLEAN, True, update=False)[0]
        np.testing.assert_allclose(
            y, np.broadcast_to(st_.affine[0].beta[None, :, None, None], y.shape),
            atol=1e-12)

    def test_eval_identity_on_standard_stats(self, rng):
        st_ = make_state(channels=4)
        x = rng.normal(0, 1, (5, 4, 3, 3))
        y = normalize_forward(st_, x, BranchTag.CLEAN, train_mode=False)
        np.testing.assert_allclose(y, x, rtol=0, atol=1e-4)  # eps effect only


class TestRouting:
    # full routing table: mode -> branch -> (stats id, affine id)
    TABLE = {
        NormMode.SINGLE: {BranchTag.CLEAN: (0, 0), BranchTag.ADV: (0, 0)},
        NormMode.DUAL: {BranchTag.CLEAN: (0, 0), BranchTag.ADV: (1, 1)},
        NormMode.CROSS: {BranchTag.CLEAN: (1, 0), BranchTag.ADV: (0, 1)},
        NormMode.DUAL_AP_ONLY: {BranchTag.CLEAN: (0, 0), BranchTag.ADV: (0, 1)},
        NormMode.DUAL_NS_ONLY: {BranchTag.CLEAN: (0, 0), BranchTag.ADV: (1, 0)},
    }

    @pytest.mark.parametrize("mode", list(TABLE))
    @pytest.mark.parametrize("branch", [BranchTag.CLEAN, BranchTag.ADV])
    def test_table(self, mode, branch):
        st_ = make_state(mode=mode)
        assert select_params(st_, branch) == self.TABLE[mode][branch]

    def test_set_counts(self):
        for mode, (ns, ap) in ((NormMode.SINGLE, (1, 1)),
                               (NormMode.DUAL, (2, 2)),
                               (NormMode.CROSS, (2, 2)),
                               (NormMode.DUAL_AP_ONLY, (1, 2)),
                               (NormMode.DUAL_NS_ONLY, (2, 1))):
            st_ = make_state(mode=mode)
            assert (len(st_.stats), len(st_.affine)) == (ns, ap)

    def test_per_sample_kinds_have_no_stats(self):
        for kind in (NormKind.LAYER, NormKind.GROUP, NormKind.INSTANCE):
            st_ = make_state(kind=kind, mode=NormMode.DUAL_AP_ONLY)
            assert st_.stats == []
            assert len(st_.affine) == 2

    def test_cross_rejected_for_per_sample_kinds(self):
        with pytest.raises(ConfigurationError):
            make_state(kind=NormKind.LAYER, mode=NormMode.CROSS)
        with pytest.raises(ConfigurationError):
            make_state(kind=NormKind.INSTANCE, mode=NormMode.DUAL_NS_ONLY)

    def test_update_isolation_bitwise(self, rng):
        st_ = make_state(mode=NormMode.DUAL)
        before = {
            "stats1_mean": st_.stats[1].mean.copy(),
            "stats1_var": st_.stats[1].var.copy(),
            "affine": [(a.gamma.copy(), a.beta.copy()) for a in st_.affine],
        }
        x = rng.normal(0, 1, (6, 4, 3, 3))
        st_.forward(x, BranchTag.CLEAN, True, update=True)
        assert st_.stats[1].mean.tobytes() == before["stats1_mean"].tobytes()
        assert st_.stats[1].var.tobytes() == before["stats1_var"].tobytes()
        for (g0, b0), ap in zip(before["affine"], st_.affine):
            assert ap.gamma.tobytes() == g0.tobytes()
            assert ap.beta.tobytes() == b0.tobytes()

    def test_group_count_must_divide_channels(self):
        with pytest.raises(ConfigurationError):
            NormLayerState(6, NormConfig(kind=NormKind.GROUP, group_count=4))


class TestUpdateRunning:
    def test_momentum_one_copies_batch(self, rng):
        s = NormStats(np.zeros(3), np.ones(3), momentum=1.0)
        bm, bv = rng.normal(0, 1, 3), rng.uniform(0, 2, 3)
        out = update_running(s, bm, bv)
        np.testing.assert_array_equal(out.mean, bm)
        np.testing.assert_array_equal(out.var, bv)

    def test_momentum_zero_keeps_running(self, rng):
        s = NormStats(rng.normal(0, 1, 3), rng.uniform(0.1, 2, 3), momentum=0.0)
        out = update_running(s, rng.normal(0, 1, 3), rng.uniform(0, 2, 3))
        np.testing.assert_array_equal(out.mean, s.mean)
        np.testing.assert_array_equal(out.var, s.var)

    def test_single_step_arithmetic(self):
        s = NormStats(np.zeros(1), np.ones(1), momentum=0.1)
        out = update_running(s, np.ones(1), np.ones(1))
        assert out.mean[0] == pytest.approx(0.1, abs=1e-12)

    def test_negative_batch_var_rejected(self):
        s = NormStats(np.zeros(2), np.ones(2))
        with pytest.raises(NumericalError):
            update_running(s, np.zeros(2), np.array([0.5, -0.1]))

    def test_convergence_to_distribution_moments(self, rng):
        # iid N(m, s^2) batches; running mean ~ m after 500 updates
        m_true, s_true = 1.5, 2.0
        s = NormStats(np.zeros(1), np.ones(1), momentum=0.1)
        batch = 64
        for _ in range(500):
            xb = rng.normal(m_true, s_true, (batch, 1))
            s = update_running(s, xb.mean(axis=0), xb.var(axis=0))
        # stationary variance of the EMA of batch means:
        # (momentum / (2 - momentum)) * s^2/batch
        se = np.sqrt(0.1 / 1.9 * s_true ** 2 / batch)
        assert abs(s.mean[0] - m_true) < 3 * se


class TestForwardContracts:
    def test_train_batch_moments_normalized(self, rng):
        # pre-affine normalized output: per-channel mean ~0, var ~1
        st_ = make_state(channels=5, eps=1e-6)
        x = rng.normal(3, 4, (8, 5, 6, 6))
        y = normalize_forward(st_, x, BranchTag.CLEAN, train_mode=True)
        mean = y.mean(axis=(0, 2, 3))
        var = y.var(axis=(0, 2, 3))
        assert np.all(np.abs(mean) < 1e-4)
        assert np.all(np.abs(var - 1) < 1e-3)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 6), st.integers(1, 5), st.integers(1, 4),
           st.integers(0, 2 ** 31 - 1))
    def test_property_batch_moments(self, n, c, h, seed):
        r = np.random.default_rng(seed)
        x = r.normal(r.normal(), abs(r.normal()) + 0.5, (n, c, h, h))
        if x.var(axis=(0, 2, 3)).min() < 1e-3:
            return  # degenerate batch
        st_ = make_state(channels=c, eps=1e-6)
        y = normalize_forward(st_, x, BranchTag.CLEAN, train_mode=True)
        assert np.all(np.abs(y.mean(axis=(0, 2, 3))) < 1e-4)
        assert np.all(np.abs(y.var(axis=(0, 2, 3)) - 1) < 1e-3)

    def test_stats_override_is_used(self, rng):
        st_ = make_state(channels=2)
        x = rng.normal(0, 1, (4, 2, 3, 3))
        ov = NormStats(np.array([5.0, -5.0]), np.array([4.0, 9.0]))
        y = normalize_forward(st_, x, BranchTag.CLEAN, train_mode=True,
                              stats_override=ov)
        want = scalar_oracle(x, NormKind.BATCH, st_.config.eps,
                             st_.affine[0].gamma, st_.affine[0].beta,
                             mean=ov.mean, var=ov.var)
        np.testing.assert_allclose(y, want, rtol=1e-6)

    def test_normalize_forward_never_mutates(self, rng):
        st_ = make_state()
        before = st_.stats[0].mean.copy()
        normalize_forward(st_, rng.normal(0, 1, (4, 4, 2, 2)),
                          BranchTag.CLEAN, train_mode=True)
        np.testing.assert_array_equal(st_.stats[0].mean, before)

    def test_empty_batch_rejected(self):
        st_ = make_state()
        with pytest.raises(ValueError):
            st_.forward(np.empty((0, 4, 2, 2)), BranchTag.CLEAN, True)

    def test_non_finite_rejected(self):
        st_ = make_state()
        x = np.ones((2, 4, 2, 2))
        x[1, 2, 0, 0] = np.nan
        with pytest.raises(NumericalError):
            st_.forward(x, BranchTag.CLEAN, True)

    def test_channel_mismatch_rejected(self, rng):
        st_ = make_state(channels=4)
        with pytest.raises(ConfigurationError):
            st_.forward(rng.normal(0, 1, (2, 3, 2, 2)), BranchTag.CLEAN, True)

    def test_eps_must_be_positive(self):
        with pytest.raises(ConfigurationError):
            NormConfig(eps=0.0)

    def test_invalid_momentum(self):
        with pytest.raises(ConfigurationError):
            NormConfig(momentum=1.5)


class TestBackward:
    @pytest.mark.parametrize("kind", KINDS)
    @pytest.mark.parametrize("train", [True, False])
    def test_grad_matches_finite_differences(self, kind, train, rng):
        if kind is not NormKind.BATCH and not train:
            return  # per-sample kinds behave identically in both modes
        c = 4
        st_ = make_state(kind=kind, channels=c)
        st_.affine[0].gamma[:] = rng.normal(1, 0.2, c)
        st_.affine[0].beta[:] = rng.normal(0, 0.2, c)
        if kind is NormKind.BATCH:
            st_.stats[0] = NormStats(rng.normal(0, 1, c), rng.uniform(0.5, 2, c))
        x = rng.normal(0, 1, (3, c, 3, 3))
        w = rng.normal(0, 1, x.shape)  # random linear functional of output

        def f(xv, gamma=None, beta=None):
            if gamma is not None:
                st_.affine[0].gamma[:] = gamma
            if beta is not None:
                st_.affine[0].beta[:] = beta
            return float((normalize_forward(st_, xv, BranchTag.CLEAN, train) * w).sum())

        y, ctx = st_.forward(x, BranchTag.CLEAN, train, update=False)
        st_.zero_grad()
        dx = st_.backward(w, ctx)
        h = 1e-6
        for _ in range(6):
            i = tuple(rng.integers(0, s) for s in x.shape)
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            fd = (f(xp) - f(xm)) / (2 * h)
            assert dx[i] == pytest.approx(fd, rel=1e-4, abs=1e-8)
        g0 = st_.affine[0].gamma.copy()
        b0 = st_.affine[0].beta.copy()
        for ci in range(c):
            gp, gm = g0.copy(), g0.copy()
            gp[ci] += h
            gm[ci] -= h
            fd = (f(x, gamma=gp) - f(x, gamma=gm)) / (2 * h)
            assert st_.g_gamma[0][ci] == pytest.approx(fd, rel=1e-4, abs=1e-8)
            st_.affine[0].gamma[:] = g0
            bp, bm_ = b0.copy(), b0.copy()
            bp[ci] += h
            bm_[ci] -= h
            fd = (f(x, beta=bp) - f(x, beta=bm_)) / (2 * h)
            assert st_.g_beta[0][ci] == pytest.approx(fd, rel=1e-4, abs=1e-8)
            st_.affine[0].beta[:] = b0
