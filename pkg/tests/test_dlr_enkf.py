import numpy as np
import pytest
from scipy import sparse

from lowrank_kbp.dlr_enkf import (
    ReducedEnsemble,
    bug_step,
    dlr_enkf_em_step,
    init_reduced_ensemble,
    iterate_dlr_enkf,
    reconstruct_particles,
    reduced_ensemble_from_draws,
    run_dlr_enkf,
    sample_reduced_cov,
    star_increments,
    truncate_ensemble,
    truncate_svd,
    weighted_qr,
)
from lowrank_kbp.dlr_kbp import stiefel_defect
from lowrank_kbp.errors import EmptyBasis, ModelError, RankExceedsWidth, TooFewParticles
from lowrank_kbp.kbp_full import FullEnsemble, enkf_step, sample_cov
from lowrank_kbp.model_core import (
    ParticleNoise,
    RngPlan,
    advection_initial_condition,
    build_upwind_model,
    sample_gaussian,
    sample_low_rank_ic,
    simulate_observations,
    simulate_signal,
)
from lowrank_kbp.serialization import read_csv
from lowrank_kbp.spatial_fem import assemble_operators, build_fem_model, build_mesh, fem_initial_condition


def _fem(sigma=0.0, rank=3, nodes=5):
    mesh = build_mesh(nodes, nodes)
    model, _ = build_fem_model(mesh, assemble_operators(mesh), "full", sigma=sigma, gamma=1e-2)
    return model, fem_initial_condition(mesh, model.mass, rank)


def _advection(d=20, sigma=1e-3, rank=4):
    model = build_upwind_model(d=d, L=10.0, decay=0.1, forcing=0.03, sigma=sigma, gamma=2.0)
    return model, advection_initial_condition(d, 10.0, rank)


def _increments(model, P, dt, seed):
    rng = np.random.default_rng(seed)
    return (rng.standard_normal((P, model.d)) * np.sqrt(dt),
            rng.standard_normal((P, model.k)) * np.sqrt(dt),
            rng.standard_normal(model.k) * np.sqrt(dt))


def test_weighted_qr_orthonormalizes_and_drops() -> None:
    rng = np.random.default_rng(0)
    W = sparse.diags(rng.uniform(0.5, 2.0, 12), format="csr")
    V = rng.standard_normal((12, 4))
    V = np.column_stack([V, V[:, 0] + 2.0 * V[:, 1]])
    Q, dropped = weighted_qr(V, W)
    assert dropped == [4]
    np.testing.assert_allclose(Q.T @ (W @ Q), np.eye(4), atol=1e-12)
    Q_plain, none = weighted_qr(V[:, :4])
    assert none == []
    np.testing.assert_allclose(Q_plain.T @ Q_plain, np.eye(4), atol=1e-12)
    with pytest.raises(EmptyBasis):
        weighted_qr(np.zeros((5, 2)))


def test_truncate_svd() -> None:
    Y = np.random.default_rng(1).standard_normal((10, 6))
    trunc = truncate_svd(Y, 3)
    assert trunc.U_R.shape == (6, 3) and trunc.V_R.shape == (10, 3)
    np.testing.assert_allclose(trunc.V_R.T @ trunc.V_R, np.eye(3), atol=1e-12)
    s = np.linalg.svd(Y, compute_uv=False)
    np.testing.assert_allclose(trunc.discarded, s[3:])
    approx = (trunc.V_R * trunc.S_R) @ trunc.U_R.T
    assert np.linalg.norm(Y - approx) == pytest.approx(np.sqrt(np.sum(s[3:] ** 2)))
    assert not trunc.tie
    assert truncate_svd(np.eye(4)[:, :3], 2).tie
    with pytest.raises(RankExceedsWidth):
        truncate_svd(Y, 7)


def test_star_increments_and_reduced_covariance() -> None:
    dW = np.random.default_rng(2).standard_normal((5, 3))
    np.testing.assert_allclose(star_increments(dW).mean(axis=0), 0.0, atol=1e-15)
    with pytest.raises(TooFewParticles):
        star_increments(dW[:1])
    ens = ReducedEnsemble(U0hat=np.zeros(4), U=np.eye(4)[:, :3], Yhat=star_increments(dW))
    np.testing.assert_allclose(sample_reduced_cov(ens), np.cov(ens.Yhat.T))


def test_reduced_ensemble_from_draws_reconstructs_particles() -> None:
    _, ic = _advection(d=12, rank=3)
    Z = sample_gaussian(ic.MY, np.random.default_rng(3), 6)
    ens = reduced_ensemble_from_draws(ic.U0, ic.U, Z)
    np.testing.assert_allclose(ens.Yhat.mean(axis=0), 0.0, atol=1e-14)
    np.testing.assert_allclose(reconstruct_particles(ens), ic.U0[:, None] + ic.U @ Z.T, atol=1e-13)
    with pytest.raises(TooFewParticles):
        init_reduced_ensemble(ic.U0, ic.U, ic.MY, 1, np.random.default_rng(0))


def test_truncate_ensemble_is_exact_at_full_rank_and_weighted() -> None:
    model, ic = _fem(rank=3)
    X = sample_low_rank_ic(ic.U0, ic.U, ic.MY, np.random.default_rng(4), size=8)
    ens = truncate_ensemble(X, 3, model.mass)
    np.testing.assert_allclose(reconstruct_particles(ens), X, atol=1e-12)
    assert stiefel_defect(ens.U, model.mass) <= 1e-10
    np.testing.assert_allclose(ens.Yhat.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(ens.U0hat, X.mean(axis=1), atol=1e-12)
    with pytest.raises(RankExceedsWidth):
        truncate_ensemble(X, 9)


def test_bug_step_recovers_full_order_enkf_at_exact_rank() -> None:
    model, ic = _fem(sigma=0.0, rank=3)
    P, dt = 8, 1e-2
    Z = sample_gaussian(ic.MY, np.random.default_rng(5), P)
    ens = reduced_ensemble_from_draws(ic.U0, ic.U, Z)
    full = FullEnsemble(ic.U0[:, None] + ic.U @ Z.T)
    for n in range(5):
        dW, dV, dZ = _increments(model, P, dt, seed=100 + n)
        ens, report = bug_step(model, ens, dZ, dt, dW, dV)
        full = enkf_step(model, full, dZ, dt, dW, dV)
        assert report.padded_cols == 0
        assert report.trunc_err <= 1e-10 * np.linalg.norm(ens.Yhat)
    X = reconstruct_particles(ens)
    np.testing.assert_allclose(X, full.particles, rtol=1e-9, atol=1e-11)
    np.testing.assert_allclose(ens.U @ sample_reduced_cov(ens) @ ens.U.T, sample_cov(full), atol=1e-11)
    assert stiefel_defect(ens.U, model.mass) <= 1e-10


def test_em_step_needs_identity_mass() -> None:
    model, ic = _fem(rank=3)
    ens = reduced_ensemble_from_draws(ic.U0, ic.U, sample_gaussian(ic.MY, np.random.default_rng(6), 4))
    dW, dV, dZ = _increments(model, 4, 1e-2, seed=0)
    with pytest.raises(ModelError):
        dlr_enkf_em_step(model, ens, dZ, 1e-2, dW, dV)


def test_em_step_is_permutation_equivariant() -> None:
    model, ic = _advection(d=8, rank=2)
    rng = np.random.default_rng(7)
    ens = reduced_ensemble_from_draws(ic.U0, ic.U, sample_gaussian(ic.MY, rng, 3))
    dW, dV, dZ = _increments(model, 3, 1e-3, seed=8)
    perm = [1, 0, 2]
    out = dlr_enkf_em_step(model, ens, dZ, 1e-3, dW, dV)
    swapped = ReducedEnsemble(U0hat=ens.U0hat, U=ens.U, Yhat=ens.Yhat[perm])
    out_swapped = dlr_enkf_em_step(model, swapped, dZ, 1e-3, dW[perm], dV[perm])
    np.testing.assert_allclose(out_swapped.Yhat, out.Yhat[perm], rtol=1e-14, atol=1e-16)
    np.testing.assert_allclose(out_swapped.U0hat, out.U0hat, rtol=1e-14, atol=1e-16)
    np.testing.assert_array_equal(out_swapped.U, out.U)


def test_bug_step_pads_when_too_few_particles() -> None:
    model, ic = _advection(d=10, rank=3)
    ens = reduced_ensemble_from_draws(ic.U0, ic.U, sample_gaussian(ic.MY, np.random.default_rng(9), 2))
    dW, dV, dZ = _increments(model, 2, 1e-3, seed=10)
    out, report = bug_step(model, ens, dZ, 1e-3, dW, dV, pad_stream=np.random.default_rng(0))
    assert out.rank == 3
    assert report.padded_cols >= 1
    assert stiefel_defect(out.U) <= 1e-10
    with pytest.raises(ModelError, match="pad_stream"):
        bug_step(model, ens, dZ, 1e-3, dW, dV)


@pytest.mark.parametrize("integrator", ["em", "bug"])
def test_long_run_keeps_ensemble_invariants(integrator) -> None:
    model, ic = _advection(d=12, sigma=1e-2, rank=3)
    dt, n_steps, P = 1e-3, 400, 6
    plan = RngPlan(3)
    x0 = sample_low_rank_ic(ic.U0, ic.U, ic.MY, plan.generator("signal-x0"))
    signal = simulate_signal(model, x0, dt, n_steps, plan.generator("signal"))
    obs = simulate_observations(model, signal, dt, plan.generator("observation"))
    ens0 = init_reduced_ensemble(ic.U0, ic.U, ic.MY, P, plan.generator("ensemble-init"))
    noise_w = ParticleNoise.from_plan(plan, "particle-w", 0, P, model.d, dt)
    noise_v = ParticleNoise.from_plan(plan, "particle-v", 0, P, model.k, dt)
    worst_mean, worst_defect = 0.0, 0.0
    for _, ens, _ in iterate_dlr_enkf(model, ens0, obs, noise_w, noise_v, integrator,
                                     pad_stream=plan.generator("pad")):
        col_norm = np.linalg.norm(ens.Yhat, axis=0)
        worst_mean = max(worst_mean, float(np.max(np.abs(ens.Yhat.mean(axis=0)) / col_norm)))
        worst_defect = max(worst_defect, stiefel_defect(ens.U))
    assert worst_mean <= 1e-12
    assert worst_defect <= 1e-10


def test_run_dlr_enkf_outputs(tmp_path) -> None:
    model, ic = _advection(d=10, rank=3)
    plan = RngPlan(4)
    dt, n_steps, P = 1e-3, 30, 5
    x0 = sample_low_rank_ic(ic.U0, ic.U, ic.MY, plan.generator("signal-x0"))
    signal = simulate_signal(model, x0, dt, n_steps, plan.generator("signal"))
    obs = simulate_observations(model, signal, dt, plan.generator("observation"))
    ens0 = init_reduced_ensemble(ic.U0, ic.U, ic.MY, P, plan.generator("ensemble-init"))

    def noise():
        return (ParticleNoise.from_plan(plan, "particle-w", 0, P, model.d, dt),
                ParticleNoise.from_plan(plan, "particle-v", 0, P, model.k, dt))

    result = run_dlr_enkf(model, ens0, obs, *noise(), "bug", signal,
                          snapshot_dir=tmp_path / "modes", snapshot_stride=10)
    assert result.diagnostics.shape == (31, 6)
    assert np.all(np.isfinite(result.rmse_series))
    assert (tmp_path / "modes" / "Yhat_0000030.lrkb").exists()
    result.write_diagnostics(tmp_path / "dlr-enkf.csv")
    header, _ = read_csv(tmp_path / "dlr-enkf.csv")
    assert header == ["t", "rmse_ensemble", "trace_Mhat", "trunc_err", "stiefel_defect", "dropped_cols"]
    particles = reconstruct_particles(result.final)
    direct = np.sqrt(np.mean(np.sum((particles - signal[-1][:, None]) ** 2, axis=0)))
    assert result.rmse_series[-1] == pytest.approx(direct, rel=1e-10)
    with pytest.raises(ModelError):
        list(iterate_dlr_enkf(model, ens0, obs, *noise(), integrator="rk4"))
