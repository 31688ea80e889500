import pytest

import fd_oracle

TOL = 1e-4


@pytest.mark.parametrize("seed", [0, 1])
def test_stage1_gradients(seed):
    assert fd_oracle.stage1_error(seed) < TOL


@pytest.mark.parametrize("adversarial", [True, False])
def test_stage2_gradients(adversarial):
    errs = fd_oracle.stage2_errors(0, adversarial)
    assert all(e < TOL for e in errs.values()), errs


def test_gan_loss_gradients():
    errs = fd_oracle.gan_loss_errors(0)
    assert all(e < TOL for e in errs.values()), errs


def test_oracle_detects_wrong_gradient():
    import numpy as np
    import torch

    t = torch.tensor([0.3, -1.2], dtype=torch.float64, requires_grad=True)

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, a):
            ctx.save_for_backward(a)
            return (a ** 3).sum()

        @staticmethod
        def backward(ctx, g):
            (a,) = ctx.saved_tensors
            return g * 2 * a ** 2  # should be 3 a^2

    err = fd_oracle.relative_error(lambda: Wrong.apply(t), [(t, 0), (t, 1)])
    assert err > 0.1
    assert np.isfinite(err)
