import numpy as np
import pytest

from cmpekit.bounds import alpha_bound
from cmpekit.datagen import random_pairwise_instance
from cmpekit.losses import (LossContext, loss_mae, loss_mse, loss_pdl_dual, loss_pdl_primal, loss_sscmpe,
                            loss_sscmpe_pen, loss_sscmpe_smooth, loss_ssl_penalty, loss_supervised_penalty,
                            pdl_dual_target, update_lambda_subgradient)
from cmpekit.oracle import brute_force_cmpe
from cmpekit.polymodel import condition_batch, evaluate

from _util import central_diff, cube, rel_err

BOUNDARY = [0, 1]


def ctx_for(inst, **kw):
    return LossContext(inst.f, inst.g, **kw)


def test_toy_values(toy):
    ctx = ctx_for(toy, alpha=1.3, lam=2.0, mu=0.5, beta=50.0, rho=0.1)
    y0 = np.zeros(2)
    assert loss_sscmpe(ctx, [0, 1])[0] == 9
    assert loss_sscmpe(ctx, y0)[0] == pytest.approx(1.3 * 7)
    assert loss_ssl_penalty(ctx, y0)[0] == pytest.approx(4 + 9)
    assert loss_pdl_primal(ctx, y0)[0] == pytest.approx(4 + 9 + 1.5)
    assert loss_sscmpe_smooth(ctx, y0, rho=0.0)[0] == pytest.approx(9.1, abs=1e-6)
    assert loss_sscmpe_pen(ctx, y0)[0] == pytest.approx(9.1 + 0.9)
    assert loss_supervised_penalty(ctx, y0, label=BOUNDARY)[0] == pytest.approx(0.5 + 6)
    zero_beta = LossContext(toy.f, toy.g, alpha=1.3, beta=0.0)
    assert loss_sscmpe_smooth(zero_beta, y0)[0] == pytest.approx(0.5 * 4 + 0.5 * 1.3 * 7)
    assert pdl_dual_target(ctx, y0) == pytest.approx(6.5)
    assert update_lambda_subgradient(LossContext(toy.f, toy.g, lam=2.0, rho=0.1), y0) == pytest.approx(2.3)


def test_supervised_values():
    assert loss_mse([1, 0], [0, 1])[0] == 1
    assert loss_mae([1, 0], [0, 1])[0] == 1
    assert loss_pdl_dual(1.5, 1.2)[0] == pytest.approx(0.3)


def test_lambda_capped(toy):
    ctx = LossContext(toy.f, toy.g, lam=9999.0, rho=100.0)
    assert update_lambda_subgradient(ctx, np.zeros(2), lam_max=1e4) == 1e4
    assert update_lambda_subgradient(ctx, [1, 1]) == 9999.0


def test_context_validation(toy):
    with pytest.raises(ValueError):
        LossContext(toy.f, toy.g, alpha=0.0)
    with pytest.raises(ValueError):
        LossContext(toy.f, toy.g, lam=-1.0)
    with pytest.raises(ValueError, match="label"):
        loss_supervised_penalty(LossContext(toy.f, toy.g), np.zeros(2))


LOSSES = {
    "mse": lambda c, y: loss_mse(y, c.label),
    "mae": lambda c, y: loss_mae(y, c.label),
    "sl-pen": lambda c, y: loss_supervised_penalty(c, y),
    "ssl-pen": loss_ssl_penalty,
    "pdl": loss_pdl_primal,
    "ss-cmpe": loss_sscmpe,
    "ss-cmpe-smooth": lambda c, y: loss_sscmpe_smooth(c, y, rho=0.3),
    "ss-cmpe-pen": loss_sscmpe_pen,
}


def gradient_errors(name, rng, points=50):
    fn = LOSSES[name]
    errs = []
    while len(errs) < points:
        inst = random_pairwise_instance(rng, int(rng.integers(2, 8)), density=0.6)
        c = LossContext(inst.f, inst.g, alpha=float(rng.uniform(1.0, 3.0)), beta=float(rng.uniform(0.5, 5.0)),
                        rho=float(rng.uniform(0, 2)), lam=float(rng.uniform(0, 5)), mu=float(rng.uniform(0, 2)),
                        label=rng.integers(0, 2, size=inst.n_y).astype(float))
        y = rng.uniform(0.02, 0.98, size=inst.n_y)
        if abs(evaluate(inst.g, y)) <= 1e-3 and name != "ss-cmpe-smooth":
            continue
        if name == "mae" and np.min(np.abs(y - c.label)) < 1e-3:
            continue
        _, grad = fn(c, y)
        errs.append(rel_err(grad, central_diff(lambda z: fn(c, z)[0], y)))
    return errs


@pytest.mark.parametrize("name", sorted(LOSSES))
def test_gradients_match_finite_differences(name, rng):
    assert max(gradient_errors(name, rng)) <= 1e-4


def test_dual_gradient():
    assert loss_pdl_dual(np.array([2.0, 0.5]), np.array([1.0, 1.0]))[1].tolist() == [1.0, -1.0]


def test_batch_agrees_with_single(rng):
    from cmpekit.datagen import random_pairwise_poly
    ph, pt = random_pairwise_poly(rng, 8), random_pairwise_poly(rng, 8)
    X = rng.integers(0, 2, size=(5, 3)).astype(float)
    F, ymap = condition_batch(ph, [0, 2, 4], X)
    G, _ = condition_batch(pt, [0, 2, 4], X)
    F = F.affine(-1.0, 1.0 + F.abs_weight_sums())
    Y = rng.uniform(size=(5, len(ymap)))
    alpha = rng.uniform(1, 2, size=5)
    lam = rng.uniform(0, 3, size=5)
    bctx = LossContext(F, G, alpha=alpha, lam=lam, beta=2.0, rho=0.5)
    for fn in (loss_sscmpe, loss_sscmpe_pen, loss_sscmpe_smooth, loss_ssl_penalty, loss_pdl_primal):
        vals, grads = fn(bctx, Y)
        for b in range(5):
            sctx = LossContext(F.row(b), G.row(b), alpha=alpha[b], lam=lam[b], beta=2.0, rho=0.5)
            v, gr = fn(sctx, Y[b])
            assert vals[b] == pytest.approx(v)
            assert np.allclose(grads[b], gr)


def consistency_failures(rng, n_instances=200):
    """Instances where the discrete minimum of the loss misses p* or an infeasible point undercuts it."""
    fails, checked = 0, 0
    while checked < n_instances:
        inst = random_pairwise_instance(rng, int(rng.integers(1, 11)), density=0.5, infeasible_prob=0.0)
        res = brute_force_cmpe(inst)
        ab = alpha_bound(inst, steps=100)
        if res.status != "optimal" or not ab.q_lower > 0:
            continue
        if ab.alpha >= inst.u_f / inst.l_f:
            continue
        checked += 1
        Y = cube(inst.n_y)
        vals, _ = loss_sscmpe(ctx_for(inst, alpha=ab.alpha), Y)
        g = evaluate(inst.g, Y)
        tol = 1e-12 * (1.0 + abs(res.p_star))
        if abs(vals.min() - res.p_star) > tol or np.any(vals[g > 0] <= res.p_star + tol):
            fails += 1
    return fails


def test_consistency_on_ratio_branch(rng):
    assert consistency_failures(rng, 60) == 0


def test_smooth_approaches_hard(rng):
    worst = 0.0
    n = 0
    while n < 100:
        inst = random_pairwise_instance(rng, int(rng.integers(2, 8)), density=0.6)
        y = rng.uniform(size=inst.n_y)
        if abs(evaluate(inst.g, y)) < 0.5:
            continue
        ctx = ctx_for(inst, alpha=float(rng.uniform(1, 3)), beta=50.0)
        worst = max(worst, abs(loss_sscmpe_smooth(ctx, y)[0] - loss_sscmpe(ctx, y)[0]))
        n += 1
    assert worst <= 1e-6


def test_penalty_keeps_argmin(rng):
    for _ in range(40):
        inst = random_pairwise_instance(rng, int(rng.integers(1, 9)), density=0.5, infeasible_prob=0.0)
        ab = alpha_bound(inst, steps=50)
        Y = cube(inst.n_y)
        ctx = ctx_for(inst, alpha=ab.alpha, rho=2.0)
        a = loss_sscmpe(ctx, Y)[0]
        b = loss_sscmpe_pen(ctx, Y)[0]
        assert set(np.flatnonzero(a == a.min())) == set(np.flatnonzero(b == b.min()))


def test_pen_with_zero_rho_is_plain(toy, rng):
    ctx = ctx_for(toy, alpha=1.7, rho=0.0)
    Y = rng.uniform(size=(20, 2))
    assert np.array_equal(loss_sscmpe_pen(ctx, Y)[0], loss_sscmpe(ctx, Y)[0])
