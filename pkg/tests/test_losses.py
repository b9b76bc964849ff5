import gradcheck
import numpy as np
import oracles
import pytest
import torch
from skimage.metrics import structural_similarity

from sspfusion.losses import (
    LossBreakdown,
    charbonnier_rec,
    fusion_objective,
    grad_loss,
    smooth_loss,
    ssim,
    ssim_loss,
    total_loss,
)


def _t(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def tie_free_triple(seed, size=16):
    """Random planes nudged apart so no |.| or max sits on a kink."""
    rng = np.random.default_rng(seed)
    f, a, b = rng.uniform(0.05, 0.95, (3, size, size))
    close = np.abs(a - b) < 1e-3
    b[close] += 2e-3
    close = np.abs(f - np.maximum(a, b)) < 1e-3
    f[close] += 2e-3
    return _t(f), _t(a), _t(b)


def sk_ssim(a, b, data_range=1.0):
    return structural_similarity(
        np.asarray(a, dtype=np.float64),
        np.asarray(b, dtype=np.float64),
        data_range=data_range,
        gaussian_weights=True,
        sigma=1.5,
        use_sample_covariance=False,
    )


# ---- charbonnier ---------------------------------------------------------


def test_rec_zero_residual_is_exactly_one(rng):
    gt = [_t(rng.integers(0, 2, (1, 1, 16 >> k, 16 >> k))) for k in range(3)]
    assert charbonnier_rec(gt, [g.clone() for g in gt], 1.0).item() == 1.0


def test_rec_degenerate_l1():
    assert charbonnier_rec([_t([[0.0]])], [_t([[1.0]])], 0.0).item() == 1.0


def test_rec_matches_scalar_oracle(rng):
    preds = [rng.uniform(size=(2, 1, 16 >> k, 16 >> k)) for k in range(3)]
    gts = [rng.integers(0, 2, p.shape).astype(float) for p in preds]
    got = charbonnier_rec([_t(p) for p in preds], [_t(g) for g in gts], 1.0).item()
    assert abs(got - oracles.charbonnier(preds, gts, 1.0)) < 1e-6
    assert got >= 1.0


def test_rec_shape_mismatch():
    with pytest.raises(ValueError):
        charbonnier_rec([_t(np.zeros((4, 4)))], [_t(np.zeros((4, 5)))])
    with pytest.raises(ValueError):
        charbonnier_rec([_t(np.zeros((4, 4)))], [])


def test_rec_gradient_vs_finite_differences(rng):
    gt = _t(rng.integers(0, 2, (16, 16)))
    pred = _t(rng.uniform(size=(16, 16)))
    err = gradcheck.check(lambda p: charbonnier_rec([p], [gt], 1.0), pred)
    assert err < 1e-4


# ---- ssim ----------------------------------------------------------------


def test_ssim_identical_triple_is_zero(rng):
    x = _t(rng.uniform(size=(32, 32)))
    assert ssim_loss(x, x, x).item() == pytest.approx(0.0, abs=1e-12)


def test_ssim_matches_reference_implementation(rng):
    a, b = rng.uniform(size=(2, 32, 32))
    assert abs(ssim(_t(a), _t(b)).item() - sk_ssim(a, b)) < 1e-6


def test_ssim_loss_inverted_visible(rng):
    ir = rng.uniform(size=(32, 32))
    vi = 1 - ir
    expected = 1 - 0.5 * (1 + sk_ssim(ir, vi))
    assert abs(ssim_loss(_t(ir), _t(ir), _t(vi)).item() - expected) < 1e-6


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim_loss(_t(np.zeros((8, 8))), _t(np.zeros((8, 8))), _t(np.zeros((8, 8))))


def test_ssim_swap_exact():
    f, a, b = tie_free_triple(3, 24)
    assert ssim_loss(f, a, b).item() == ssim_loss(f, b, a).item()


def test_ssim_gradient_vs_finite_differences():
    f, a, b = tie_free_triple(4)
    assert gradcheck.check(lambda x: ssim_loss(x, a, b), f) < 1e-4


# ---- smooth --------------------------------------------------------------


def test_smooth_anchors():
    a, b = _t(np.zeros((4, 4))), _t(np.ones((4, 4)))
    assert smooth_loss(torch.maximum(a, b), a, b).item() == 0.0
    assert smooth_loss(_t(np.zeros((4, 4))), a, b).item() == 1.0


def test_smooth_matches_oracle_and_is_symmetric():
    f, a, b = tie_free_triple(5)
    assert abs(smooth_loss(f, a, b).item() - oracles.smooth(f.numpy(), a.numpy(), b.numpy())) < 1e-6
    assert smooth_loss(f, a, b).item() == smooth_loss(f, b, a).item()


def test_smooth_shape_mismatch():
    with pytest.raises(ValueError):
        smooth_loss(_t(np.zeros((4, 4))), _t(np.zeros((4, 4))), _t(np.zeros((4, 5))))


def test_smooth_gradient_vs_finite_differences():
    f, a, b = tie_free_triple(6)
    assert gradcheck.check(lambda x: smooth_loss(x, a, b), f) < 1e-4


# ---- grad ----------------------------------------------------------------


def test_grad_identical_triple_is_zero(rng):
    x = _t(rng.uniform(size=(16, 16)))
    assert grad_loss(x, x, x).item() == 0.0


def test_grad_constant_fused_vs_step_sources():
    step = np.zeros((10, 12))
    step[:, 6:] = 1.0
    got = grad_loss(_t(np.full_like(step, 0.5)), _t(step), _t(step)).item()
    assert abs(got - oracles.sobel_magnitude(step).mean()) < 1e-12


def test_grad_symmetric_in_sources():
    f, a, b = tie_free_triple(7)
    assert grad_loss(f, a, b).item() == grad_loss(f, b, a).item()


def test_grad_gradient_vs_finite_differences():
    f, a, b = tie_free_triple(8)
    assert gradcheck.check(lambda x: grad_loss(x, a, b), f) < 1e-4


def test_grad_flat_fused_has_finite_gradient():
    f = _t(np.full((8, 8), 0.3)).requires_grad_(True)
    _, a, b = tie_free_triple(9, 8)
    grad_loss(f, a, b).backward()
    assert torch.isfinite(f.grad).all()


# ---- total ---------------------------------------------------------------


def test_total_alpha_anchor():
    out = total_loss(1.0, 0.0, 0.0, 0.0, alpha=0.01)
    assert abs(out.total.item() - 0.01) < 1e-12


def test_total_alpha_zero_is_fusion_sum():
    out = total_loss(5.0, 0.2, 0.3, 0.4, alpha=0.0)
    assert out.total.item() == pytest.approx(0.9, abs=1e-12)
    assert out.fus.item() == pytest.approx(0.9, abs=1e-12)


def test_total_linearity(rng):
    for _ in range(20):
        rec, s, sm, g = rng.uniform(0, 2, 4)
        out = total_loss(rec, s, sm, g, alpha=0.01)
        assert abs(out.total.item() - (0.01 * rec + s + sm + g)) < 1e-6


def test_total_rejects_bad_alpha():
    with pytest.raises(ValueError):
        total_loss(1.0, 0.0, 0.0, 0.0, alpha=-1.0)


def test_breakdown_floats_and_bounds():
    f, a, b = tie_free_triple(10)
    soft = [_t(np.full((1, 1, 16, 16), 0.4))]
    gt = [_t(np.ones((1, 1, 16, 16)))]
    out = fusion_objective(f, a, b, soft, soft, gt, gt)
    vals = out.as_floats()
    assert isinstance(out, LossBreakdown)
    assert set(vals) == {"total", "rec", "ssim", "smooth", "grad", "alpha", "epsilon"}
    assert 0 <= vals["ssim"] <= 2 and vals["smooth"] >= 0 and vals["grad"] >= 0 and vals["rec"] >= 1.0
    assert abs(vals["total"] - (0.01 * vals["rec"] + vals["ssim"] + vals["smooth"] + vals["grad"])) < 1e-6


def test_objective_without_soft_predictions_reports_zero_rec():
    f, a, b = tie_free_triple(11)
    assert fusion_objective(f, a, b).rec.item() == 0.0
