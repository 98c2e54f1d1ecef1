import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beamkit.errors import BeamkitError, NumericalError
from beamkit.models import BeamformerVariant, tvv_sparse
from beamkit.online import OnlineBeamformer, OnlineParams, rho, run_online, schedule, tvv_step
from beamkit.scene import oracle_mask
from beamkit.stft import stft

from conftest import crandn, small_scene, unit

SMLDR = BeamformerVariant.MaskSMLDR


def stationary_bins(seed=0, k_len=16, m=4, t_len=500, snr=3.0):
    """Spatially white noise plus one source with random per-bin steering."""
    rng = np.random.default_rng(seed)
    h = np.stack([unit(np.r_[1.0, crandn(rng, m - 1)]) for _ in range(k_len)])
    s = crandn(rng, t_len, k_len) * snr
    n = crandn(rng, m, t_len, k_len)
    x = np.einsum("km,tk->mtk", h, s) + n
    ts = np.abs(s * h[None, :, 0]) ** 2
    mask = ts / (ts + np.abs(n[0]) ** 2)
    return x, mask, h


def direct_mpdr_filters(x, h, params):
    """Filters from the exponentially weighted SCM built and inverted directly."""
    m, t_len, k_len = x.shape
    eye = np.eye(m)
    v = np.zeros((k_len, m, m), complex)
    total = 0.0
    out = []
    for t in range(1, t_len + 1):
        alpha, _ = schedule(params, t)
        total = 1.0 + alpha * total
        r = 1.0 - 1.0 / total
        xt = x[:, t - 1].T
        v = r * v + (1 - r) * xt[:, :, None] * xt.conj()[:, None, :]
        if t == 1:
            tr = np.real(np.einsum("kii->k", v)) / m
            v = v + 1e-6 * tr[:, None, None] * eye
        u = np.linalg.solve(v, h[..., None])[..., 0]
        out.append(u / np.sum(h.conj() * u, axis=1)[:, None])
    return np.array(out)


# -- rho and schedule ------------------------------------------------------

def test_rho_examples():
    assert rho(1, 0.96) == 0.0
    assert rho(4, 1.0) == pytest.approx(0.75, abs=1e-15)
    direct = sum(0.96 ** (100 - tau) for tau in range(1, 101))
    assert abs(rho(100, 0.96) - (1 - 1 / direct)) <= 1e-12
    with pytest.raises(ValueError):
        rho(0, 0.9)


@settings(max_examples=50, deadline=None)
@given(t=st.integers(1, 400), alpha=st.floats(0.5, 0.999))
def test_rho_closed_form(t, alpha):
    closed = 1 - (1 - alpha) / (1 - alpha ** t)
    assert rho(t, alpha) == pytest.approx(closed, abs=1e-12)
    assert 0.0 <= rho(t, alpha) < 1.0


def test_schedule_examples():
    p = OnlineParams()
    assert schedule(p, 1) == (0.96, 0.0)
    assert schedule(p, 99) == (0.96, 0.0)
    assert schedule(p.resolved(True), 100) == (0.99, 0.99)
    assert schedule(p.resolved(False), 100) == (0.99, 0.8)
    with pytest.raises(ValueError):
        schedule(p, 0)


@pytest.mark.parametrize("kw", [dict(alpha_after=1.2), dict(gamma=-0.1), dict(t_switch=0),
                                dict(nu_after=2.0), dict(delta_init=0.0)])
def test_online_params_invariants(kw):
    with pytest.raises(ValueError):
        OnlineParams(**kw)


# -- TVV recursion ---------------------------------------------------------

def test_tvv_step_examples(rng):
    lam0 = rng.uniform(0.5, 2, 5)
    for v in ("MLDR", "MaskMLDR", "MaskPMLDR", "MaskSMLDR"):
        out = tvv_step(BeamformerVariant.parse(v), lam0, 1.0, crandn(rng, 5), rng.uniform(size=5))
        np.testing.assert_array_equal(out, lam0)
    assert tvv_step(SMLDR, np.ones(1), 0.0, masked_power=np.array([8.0]))[0] == 2.0


def test_tvv_step_sequence_against_recursion(rng):
    gamma = 0.1
    drives = rng.uniform(0, 3, 50)
    lam = np.array([1e-10])
    ref = 1e-10
    for d in drives:
        lam = tvv_step(SMLDR, lam, gamma, masked_power=np.array([d]))
        ref = max(gamma * ref + (1 - gamma) * d / 4, 1e-10)
        assert abs(lam[0] - ref) <= 1e-12


# -- boundaries and equivalences -------------------------------------------

def test_first_frame_hand_computation():
    x1 = np.array([1.0 + 1j, 2.0 - 0.5j])
    eng = OnlineBeamformer(1, 2, variant="MPDR", sve="fixed", masked=False,
                           h_init=np.array([[1.0, 0.3j]]))
    eng.process_frame(x1[None])
    a = abs(x1[0]) ** 2
    d = abs(x1[1]) ** 2
    b = x1[0] * np.conj(x1[1])
    load = 1e-6 * (a + d) / 2
    a, d = a + load, d + load
    det = a * d - abs(b) ** 2
    hand = np.array([[d, -b], [-np.conj(b), a]]) / det
    np.testing.assert_allclose(eng.U[0], hand, rtol=1e-9)


def test_rls_matches_cumulative_batch(rng):
    m, k_len, t_len = 4, 8, 256
    x = crandn(rng, m, t_len, k_len)
    h = crandn(rng, k_len, m)
    p = OnlineParams(alpha_initial=1.0, alpha_after=1.0, nu_after=0.0)
    _, eng, _ = run_online(x, variant="MPDR", sve="fixed", h_init=h, params=p)
    v = np.einsum("mtk,ntk->kmn", x, x.conj()) / t_len
    direct = np.linalg.inv(v)
    err = np.linalg.norm(eng.U - direct, axis=(1, 2)) / np.linalg.norm(direct, axis=(1, 2))
    assert np.max(err) <= 1e-6


def test_default_schedule_matches_direct_inversion():
    x, _, h = stationary_bins()
    ws = []
    run_online(x, variant="MPDR", sve="fixed", h_init=h,
               callback=lambda e: ws.append(e.target_filter.copy()))
    oracle = direct_mpdr_filters(x, h, OnlineParams().resolved(False))
    err = np.linalg.norm(np.array(ws) - oracle, axis=2) / np.linalg.norm(oracle, axis=2)
    assert np.max(err) <= 1e-6


@pytest.mark.xfail(strict=True, reason="per-frame filter jitter at alpha=0.99 is ~4e-2 even for "
                                       "the exact exponentially weighted solution")
def test_stationary_filter_change_below_1e3():
    x, mask, h = stationary_bins()
    ws = []
    run_online(x, mask, callback=lambda e: ws.append(e.target_filter.copy()))
    step = np.linalg.norm(np.diff(np.array(ws), axis=0), axis=2)
    assert np.max(step[400:]) <= 1e-3


# -- invariants ------------------------------------------------------------

@pytest.fixture(scope="module")
def hc_run():
    mix, truth = small_scene(seed=5, doa=-15.0, snr_db=5.0, duration=1.5)
    x = stft(mix).data
    mask = oracle_mask(truth)
    diags = []
    y, eng, trace = run_online(x, mask, callback=lambda e: diags.append(e.last))
    return y, eng, trace, diags


def test_hc_frame_invariants(hc_run):
    y, eng, trace, diags = hc_run
    assert len(diags) == y.shape[0]
    assert max(d.distortionless for d in diags) <= 1e-8
    assert max(d.normalization for d in diags) <= 1e-6
    assert max(d.drift for d in diags) <= 1e-6
    assert np.all(np.isfinite(y))
    np.testing.assert_allclose(np.linalg.norm(trace, axis=2), 1.0, atol=1e-10)
    for u in (eng.U, eng.Uz):
        np.testing.assert_allclose(u, np.conj(np.swapaxes(u, 1, 2)), atol=1e-12 * np.abs(u).max())
        assert np.all(np.linalg.eigvalsh(u) > 0)
    assert np.all(eng.lam >= 1e-10) and np.all(eng.Pn >= 0)


def test_long_random_run_stays_finite():
    rng = np.random.default_rng(7)
    k_len, m, t_len = 3, 3, 10_000
    eng = OnlineBeamformer(k_len, m)
    worst = 0.0
    for t in range(t_len):
        raw = crandn(rng, k_len, m) * rng.uniform(0, 4)
        x_t = np.clip(raw.real, -3, 3) + 1j * np.clip(raw.imag, -3, 3)
        mask_t = rng.uniform(size=k_len)
        y = eng.process_frame(x_t, mask_t)
        assert np.all(np.isfinite(y))
        worst = max(worst, eng.last.drift)
    assert worst <= 1e-6
    assert eng.last.distortionless <= 1e-8


def test_noise_power_with_no_smoothing(rng):
    p = OnlineParams(gamma_n=0.0)
    eng = OnlineBeamformer(4, 3, params=p)
    for _ in range(5):
        x_t = crandn(rng, 4, 3)
        w, a = eng.W.copy(), eng.A.copy()
        eng.process_frame(x_t, rng.uniform(size=4))
        z = np.einsum("kij,kj->ki", w, x_t)[:, 1:]
        n_hat = np.einsum("kmm->km", a)[:, 1:] * z
        np.testing.assert_allclose(eng.Pn, np.sum(np.abs(n_hat) ** 2, axis=1), rtol=1e-12)


def test_lambda_with_no_smoothing_is_single_frame_sparse(rng):
    p = OnlineParams(gamma=0.0)
    eng = OnlineBeamformer(5, 4, params=p)
    for _ in range(4):
        x_t = crandn(rng, 5, 4)
        mask_t = rng.uniform(size=5)
        eng.process_frame(x_t, mask_t)
        med = np.median(np.abs(x_t), axis=1)
        floored = np.maximum(mask_t, p.epsilon)
        np.testing.assert_allclose(eng.lam, tvv_sparse(floored[None], med[None], 0)[0],
                                   rtol=1e-12)


def test_denominator_collapse_reloads(rng):
    eng = OnlineBeamformer(2, 3, variant="MPDR", sve="fixed", masked=False,
                           h_init=crandn(rng, 2, 3))
    for _ in range(3):
        eng.process_frame(crandn(rng, 2, 3))
    # a negative-definite inverse drives the rank-1 denominator below the floor
    eng.U = -1e6 * np.broadcast_to(np.eye(3), eng.U.shape).astype(complex)
    eng.process_frame(crandn(rng, 2, 3))
    assert eng.reloads == 2
    m = 3
    tr = np.real(np.einsum("kii->k", eng.V)) / m
    loaded = eng.V + 1e-6 * tr[:, None, None] * np.eye(m)
    np.testing.assert_allclose(eng.U, np.linalg.inv(loaded), rtol=1e-8)


def test_engine_errors(rng):
    eng = OnlineBeamformer(2, 3)
    with pytest.raises(NumericalError):
        eng.process_frame(np.full((2, 3), np.nan), np.ones(2))
    with pytest.raises(BeamkitError):
        eng.process_frame(np.ones((3, 3)), np.ones(3))
    with pytest.raises(BeamkitError):
        eng.process_frame(np.ones((2, 3)))
    with pytest.raises(BeamkitError):
        OnlineBeamformer(2, 3, sve="fixed")
    with pytest.raises(BeamkitError):
        OnlineBeamformer(2, 3, sve="ica_pc")
    with pytest.raises(BeamkitError):
        OnlineBeamformer(2, 3, masked=False)
    with pytest.raises(BeamkitError):
        OnlineBeamformer(2, 3, sve="eig")
    OnlineBeamformer(2, 3, sve="ica_pc", params=OnlineParams(a1=10.0))


@pytest.mark.parametrize("sve", ["mask_only", "wscm", "ica_lc", "ica_pc"])
def test_other_sve_modes(sve):
    mix, truth = small_scene(seed=5, doa=-15.0, snr_db=5.0, duration=0.8)
    x = stft(mix).data
    p = OnlineParams(a1=100.0)
    diags = []
    run_online(x, oracle_mask(truth), callback=lambda e: diags.append(e.last), sve=sve, params=p)
    # ICA-PC trades the hard constraint for a penalty, so only the others are exact
    if sve != "ica_pc":
        assert max(d.distortionless for d in diags) <= 1e-8
    if sve == "ica_lc":
        assert max(d.null for d in diags) <= 1e-6
    assert all(math.isfinite(d.h_cosine_drift) for d in diags)
