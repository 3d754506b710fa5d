import numpy as np
import pytest

from lowrank_kbp.dlr_kbp import (
    covariance_matvec,
    dlr_kbp_step,
    dlr_modes_step,
    energy,
    iterate_dlr_kbp_process,
    iterate_reduced_kb,
    modified_riccati_step,
    oja_step,
    project_operators,
    reconstruct_cov,
    reduced_riccati_step,
    run_reduced_kb,
    stiefel_defect,
)
from lowrank_kbp.errors import DimensionMismatch
from lowrank_kbp.kbp_full import iterate_kb, kb_mean_step, riccati_step
from lowrank_kbp.linalg import OperationCounter
from lowrank_kbp.metrics import subspace_distance
from lowrank_kbp.model_core import (
    LowRankState,
    ObservationPath,
    ParticleNoise,
    RngPlan,
    advection_initial_condition,
    build_upwind_model,
    sample_gaussian,
    sample_low_rank_ic,
    simulate_observations,
    simulate_signal,
    truncate_low_rank,
)
from lowrank_kbp.serialization import read_csv, read_lrkb


def _advection(d=20, sigma=1e-3, rank=5, L=10.0):
    model = build_upwind_model(d=d, L=L, decay=0.1, forcing=0.03, sigma=sigma, gamma=2.0)
    return model, advection_initial_condition(d, L, rank)


def _truth(model, ic, dt, n_steps, seed=0):
    plan = RngPlan(seed)
    x0 = sample_low_rank_ic(ic.U0, ic.U, ic.MY, plan.generator("signal-x0"))
    signal = simulate_signal(model, x0, dt, n_steps, plan.generator("signal"))
    return signal, simulate_observations(model, signal, dt, plan.generator("observation"))


def _symmetric_with_gap(d=30, R=5, seed=0):
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    vals = np.concatenate([np.linspace(5.0, 3.0, R), rng.uniform(-1.0, 2.0, d - R)])
    return Q @ np.diag(vals) @ Q.T, Q[:, :R]


def test_full_rank_identity_basis_reproduces_kalman_bucy() -> None:
    model, _ = _advection(d=10, sigma=1e-2)
    rng = np.random.default_rng(1)
    B = rng.standard_normal((10, 10))
    P0 = 0.1 * (B @ B.T) / 10 + 0.01 * np.eye(10)
    m0 = rng.standard_normal(10)
    state = LowRankState(U0=m0, U=np.eye(10), MY=P0)
    signal, obs = _truth(model, advection_initial_condition(10, 10.0, 3), 1e-3, 100)
    result = run_reduced_kb(model, state, obs, signal, full_reference=(m0, P0))
    assert result.column("mean_err").max() <= 1e-10
    assert result.column("cov_err_frob").max() <= 1e-10
    np.testing.assert_allclose(result.column("rmse"), result.column("rmse_full"), rtol=1e-9)


def test_dlr_kbp_step_matches_moment_formulas() -> None:
    model, ic = _advection(d=12, rank=3)
    dZ, dt = np.random.default_rng(2).standard_normal(12) * 1e-2, 1e-3
    nxt = dlr_kbp_step(model, ic, dZ, dt)
    P = ic.covariance()
    np.testing.assert_allclose(nxt.U0, kb_mean_step(model, ic.U0, P, dZ, dt), atol=1e-13)
    np.testing.assert_allclose(nxt.MY, reduced_riccati_step(model.A, model.Sigma, model.S, ic.U, ic.MY, dt))
    assert stiefel_defect(nxt.U) <= 1e-12


def test_exact_rank_noiseless_filter_converges_to_full_order() -> None:
    model, ic = _advection(d=30, sigma=0.0, rank=5)
    errors = []
    for dt in (2e-3, 1e-3):
        n_steps = int(round(0.2 / dt))
        signal, obs = _truth(model, ic, dt, n_steps)
        result = run_reduced_kb(model, ic, obs, signal, full_reference=(ic.U0, ic.covariance()))
        rel_cov = result.column("cov_err_frob")[1:] / result.column("cov_norm_full")[1:]
        rel_mean = result.column("mean_err")[1:] / result.column("mean_norm_full")[1:]
        assert rel_cov.max() <= 5e-2
        assert rel_mean.max() <= 5e-2
        errors.append(rel_cov.max())
    assert errors[1] < errors[0]


def test_reduced_riccati_matches_modified_riccati_to_first_order() -> None:
    model, ic = _advection(d=20, sigma=0.1, rank=6)
    state0 = truncate_low_rank(ic, 3)
    gaps = []
    for dt in (1e-3, 5e-4):
        n_steps = int(round(0.2 / dt))
        obs = ObservationPath(dt, np.zeros((n_steps, model.k)))
        P = reconstruct_cov(state0.U, state0.MY)
        gap = 0.0
        for _, state in iterate_reduced_kb(model, state0, obs):
            gap = max(gap, float(np.linalg.norm(reconstruct_cov(state.U, state.MY) - P)))
            P = modified_riccati_step(model, state.U, P, dt)
        gaps.append(gap)
    assert 1.6 <= gaps[0] / gaps[1] <= 2.4


def test_oja_flow_finds_dominant_eigenspace() -> None:
    A, dominant = _symmetric_with_gap()
    U = np.linalg.qr(np.random.default_rng(3).standard_normal((30, 5)))[0]
    dt, previous = 1e-2, energy(A, U)
    for _ in range(20000):
        U = oja_step(A, U, dt)
        current = energy(A, U)
        assert current >= previous - 1e-9
        previous = current
    assert subspace_distance(U, dominant) <= 1e-6
    assert stiefel_defect(U) <= 1e-12


def test_oja_step_without_reorthonormalization_drifts_at_second_order() -> None:
    A, _ = _symmetric_with_gap(d=10, R=2)
    U = np.linalg.qr(np.random.default_rng(4).standard_normal((10, 2)))[0]
    defects = [stiefel_defect(oja_step(A, U, dt, reorthonormalize=False)) for dt in (1e-2, 5e-3)]
    assert defects[0] / defects[1] == pytest.approx(4.0, rel=1e-6)


def test_covariance_matvec_and_projection() -> None:
    model, ic = _advection(d=15, rank=4)
    v = np.random.default_rng(5).standard_normal(15)
    np.testing.assert_allclose(covariance_matvec(ic.U, ic.MY, v), ic.covariance() @ v, atol=1e-12)
    ops = project_operators(model, ic.U)
    np.testing.assert_allclose(ops.A_U, ic.U.T @ (model.A @ ic.U), atol=1e-12)
    assert ops.G.shape == (model.k, 4)


def test_modes_step_batch_and_checks() -> None:
    model, ic = _advection(d=10, rank=3)
    rng = np.random.default_rng(6)
    Y = rng.standard_normal((3, 2))
    dW, dV = rng.standard_normal((10, 2)) * 0.03, rng.standard_normal((10, 2)) * 0.03
    batch = dlr_modes_step(model, ic.U, ic.MY, Y, 1e-3, dW, dV)
    for j in range(2):
        single = dlr_modes_step(model, ic.U, ic.MY, Y[:, j], 1e-3, dW[:, j], dV[:, j])
        np.testing.assert_allclose(batch[:, j], single, atol=1e-14)
    with pytest.raises(DimensionMismatch):
        dlr_modes_step(model, ic.U, ic.MY, np.zeros(4), 1e-3, dW[:, 0], dV[:, 0])


def test_process_realizations_consume_their_own_streams() -> None:
    model, ic = _advection(d=10, rank=3)
    signal, obs = _truth(model, ic, 1e-3, 20)
    plan = RngPlan(9)
    Y0 = np.zeros((3, 2))

    def final(n_real):
        noise_w = ParticleNoise.from_plan(plan, "particle-w", 0, n_real, model.d, obs.dt)
        noise_v = ParticleNoise.from_plan(plan, "particle-v", 0, n_real, model.k, obs.dt)
        *_, (n, state, Y) = iterate_dlr_kbp_process(model, ic, Y0[:, :n_real], obs, noise_w, noise_v)
        return n, state, Y

    n, state, Y2 = final(2)
    _, _, Y1 = final(1)
    assert n == 20
    assert Y2.shape == (3, 2)
    np.testing.assert_allclose(Y1[:, 0], Y2[:, 0], rtol=1e-12, atol=1e-15)
    *_, (_, reduced) = iterate_reduced_kb(model, ic, obs)
    np.testing.assert_array_equal(state.MY, reduced.MY)


def test_flop_counts_scale_linearly_for_low_rank_and_superlinearly_for_full_order() -> None:
    low, full = [], []
    for d in (50, 100, 200, 400):
        model, ic = _advection(d=d, rank=5, L=float(d) / 10.0)
        dZ = np.zeros(d)
        with OperationCounter() as ops:
            dlr_kbp_step(model, ic, dZ, 1e-4)
        low.append(ops.flops)
        P = ic.covariance()
        with OperationCounter() as ops:
            kb_mean_step(model, ic.U0, P, dZ, 1e-4)
            riccati_step(model, P, 1e-4)
        full.append(ops.flops)
    for i in range(3):
        assert 1.8 <= low[i + 1] / low[i] <= 2.2
        assert full[i + 1] / full[i] >= 4.0


def test_rank_sweep_errors_respect_best_approximation() -> None:
    model, ic = _advection(d=30, sigma=1e-3, rank=8)
    signal, obs = _truth(model, ic, 1e-3, 100)
    terminal = []
    for R in (2, 4, 8):
        result = run_reduced_kb(model, truncate_low_rank(ic, R), obs, signal,
                                full_reference=(ic.U0, ic.covariance()))
        assert np.all(result.column("cov_err_frob") >= result.column("bap") - 1e-12)
        terminal.append(result.column("cov_err_frob")[-1])
        assert result.clamp_events == 0
    assert terminal[0] >= terminal[1] >= terminal[2]


def test_run_reduced_kb_outputs(tmp_path) -> None:
    model, ic = _advection(d=10, rank=3)
    signal, obs = _truth(model, ic, 1e-3, 20)
    result = run_reduced_kb(model, ic, obs, signal, full_reference=(ic.U0, ic.covariance()),
                            snapshot_dir=tmp_path / "modes", snapshot_stride=10)
    assert result.snapshots == [0, 10, 20]
    assert read_lrkb(tmp_path / "modes" / "U_0000010.lrkb").shape == (10, 3)
    assert result.w2_final is not None and result.w2_final >= 0.0
    assert np.isnan(run_reduced_kb(model, ic, obs).column("mean_err")).all()
    result.write_diagnostics(tmp_path / "dlr.csv")
    header, data = read_csv(tmp_path / "dlr.csv")
    assert header[:4] == ["t", "mean_err", "cov_err_frob", "bap"]
    assert data.shape == (21, len(header))


def _exact_rank_gaps(model, ic, obs):
    """Max relative mean and covariance gaps between the low-rank and the full-order filter."""
    mean_gap = cov_gap = 0.0
    full = iterate_kb(model, ic.U0, ic.covariance(), obs)
    for (n, state), (_, m, P) in zip(iterate_reduced_kb(model, ic, obs), full):
        if n == 0:
            continue
        mean_gap = max(mean_gap, float(np.linalg.norm(state.U0 - m) / np.linalg.norm(m)))
        cov_gap = max(cov_gap, float(np.linalg.norm(reconstruct_cov(state.U, state.MY) - P) / np.linalg.norm(P)))
    return mean_gap, cov_gap


@pytest.mark.slow
def test_exact_rank_noiseless_filter_stays_within_time_discretization_gap() -> None:
    model, ic = _advection(d=100, sigma=0.0, rank=25)
    _, obs = _truth(model, ic, 1e-4, 10000, seed=42)
    mean_gap, cov_gap = _exact_rank_gaps(model, ic, obs)
    assert cov_gap <= 1e-3
    assert mean_gap <= 2e-4

    # the covariance gap does not depend on the observations
    _, fine_cov_gap = _exact_rank_gaps(model, ic, ObservationPath(5e-5, np.zeros((20000, model.k))))
    assert 1.6 <= cov_gap / fine_cov_gap <= 2.4


def test_modes_and_stochastic_coefficients_ignore_the_observation_path() -> None:
    model, ic = _advection(d=10, rank=3)
    signal, obs = _truth(model, ic, 1e-3, 30)
    other = simulate_observations(model, signal, 1e-3, np.random.default_rng(123))
    assert not np.array_equal(obs.dZ, other.dZ)
    plan = RngPlan(5)
    Y0 = sample_gaussian(ic.MY, plan.generator("ensemble-init"), 4).T

    def trajectory(path):
        noise_w = ParticleNoise.from_plan(plan, "particle-w", 0, 4, model.d, path.dt)
        noise_v = ParticleNoise.from_plan(plan, "particle-v", 0, 4, model.k, path.dt)
        return list(iterate_dlr_kbp_process(model, ic, Y0, path, noise_w, noise_v))

    for (_, a, Ya), (_, b, Yb) in zip(trajectory(obs), trajectory(other)):
        np.testing.assert_array_equal(a.U, b.U)
        np.testing.assert_array_equal(a.MY, b.MY)
        np.testing.assert_array_equal(Ya, Yb)
    assert not np.array_equal(a.U0, b.U0)


def test_reduced_covariance_is_clamped_to_psd() -> None:
    # S = I / gamma is large enough that one explicit step overshoots below zero
    model = build_upwind_model(d=10, L=10.0, decay=0.1, forcing=0.0, sigma=0.0, gamma=1e-2)
    ic = advection_initial_condition(10, 10.0, 3)
    state = LowRankState(U0=ic.U0, U=ic.U, MY=np.eye(3))
    dt = 0.1
    raw = reduced_riccati_step(model.A, model.Sigma, model.S, state.U, state.MY, dt)
    assert np.linalg.eigvalsh(raw)[0] < 0.0

    nxt = dlr_kbp_step(model, state, np.zeros(10), dt)
    assert nxt.clamped == 3
    assert np.linalg.eigvalsh(nxt.MY)[0] >= 0.0

    result = run_reduced_kb(model, state, ObservationPath(dt, np.zeros((2, 10))), log_every=0)
    assert result.clamp_events == 3
    assert np.linalg.eigvalsh(result.final.MY)[0] >= 0.0
