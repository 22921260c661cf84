import numpy as np
import pytest
import torch

from jetflow.factoring import (DegenerateCovarianceError, InvertibleLinear, SingularMatrixError, apply_linear,
                               gaussian_logprob, invert_linear, merge, pca_init, split_post_flow)


def test_split_and_merge():
    z = torch.randn(2, 5, 12)
    hat, tilde = split_post_flow(z, 4)
    assert hat.shape == (2, 5, 4) and tilde.shape == (2, 5, 8)
    assert torch.equal(merge(hat, tilde), z)
    hat, tilde = split_post_flow(z, 12)
    assert tilde.shape[-1] == 0 and gaussian_logprob(tilde).abs().max() == 0
    for bad in (0, 13):
        with pytest.raises(IndexError):
            split_post_flow(z, bad)


def test_gaussian_logprob_matches_scipy():
    from scipy.stats import norm

    v = torch.randn(3, 4, 5, dtype=torch.float64)
    ref = norm.logpdf(v.numpy()).sum(axis=(1, 2))
    np.testing.assert_allclose(gaussian_logprob(v).numpy(), ref, rtol=1e-12)


def test_linear_volume_and_inverse():
    lin = InvertibleLinear(12, "random_orthogonal", seed=3)
    with torch.no_grad():
        lin.weight.mul_(torch.linspace(0.5, 2.0, 12)[:, None])
    x = torch.randn(2, 5, 12)
    hat, tilde, vol = apply_linear(x, lin, 4)
    expected = 5 * float(np.linalg.slogdet(lin.weight.detach().double().numpy())[1])
    assert torch.allclose(vol, torch.full((2,), expected, dtype=torch.float64))
    assert (invert_linear(hat, tilde, lin) - x).abs().max() < 1e-5


def test_identity_init_is_exact():
    lin = InvertibleLinear(6)
    x = torch.randn(1, 3, 6)
    hat, tilde, vol = apply_linear(x, lin, 6)
    assert torch.equal(hat, x) and float(vol.detach()[0]) == 0.0


def test_singular_and_ill_conditioned():
    lin = InvertibleLinear(4, matrix=np.diag([1.0, 1.0, 1.0, 0.0]))
    with pytest.raises(SingularMatrixError):
        apply_linear(torch.randn(1, 2, 4), lin, 2)
    lin = InvertibleLinear(4, matrix=np.diag([1.0, 1.0, 1.0, 1e-7]))
    with pytest.warns(RuntimeWarning):
        invert_linear(torch.zeros(1, 2, 2), torch.zeros(1, 2, 2), lin)


def test_pca_rows_ordered_orthonormal_and_sign_fixed():
    rng = np.random.default_rng(0)
    images = rng.normal(size=(64, 4, 4, 3)) * np.linspace(1, 5, 3)
    w = pca_init(images, 2)
    assert w.shape == (12, 12)
    np.testing.assert_allclose(w @ w.T, np.eye(12), atol=1e-10)
    for row in w:
        assert row[np.abs(row).argmax()] > 0
    patches = images.reshape(64, 2, 2, 2, 2, 3).transpose(0, 1, 3, 2, 4, 5).reshape(-1, 12)
    var = (patches - patches.mean(0)) @ w.T
    assert np.all(np.diff(var.var(0)) <= 1e-9)


def test_pca_rejects_constant_images():
    with pytest.raises(DegenerateCovarianceError):
        pca_init(np.full((32, 4, 4, 3), 7.0), 2)
