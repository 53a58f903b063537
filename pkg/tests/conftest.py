"""Shared helpers for gradient-oracle fixtures.

Central-difference checks are only informative where the probed gradient
rises above the float noise floor, so the float32 fixtures are conditioned:
positive-valued operands (gradients become sums of positive terms), a fixed
positive readout, and a resampling screen for the one op whose gradient can
legitimately vanish coordinate-wise (row normalization). The float64 arm
uses signed operands and needs no conditioning beyond that screen.
"""

import numpy as np
import pytest

from mvitac import tensor as T


def vals(rng, shape, lo=0.5, hi=1.5, signed=False):
    v = rng.uniform(lo, hi, size=shape)
    if signed:
        v *= rng.choice([-1.0, 1.0], size=shape)
    return v


def make_readout(rng, cols):
    """Fixed positive linear readout to a scalar; built once per instance."""
    w = T.Tensor(vals(rng, (cols, 1)))

    def apply(x):
        if x.ndim > 2:
            x = T.batch_flatten(x)
        col = T.matmul(x, w)
        ones = T.Tensor(np.ones((1, col.shape[0])))
        return T.matmul(ones, col)

    return apply


def max_grad_error(build, n_instances=20, dtype=np.float32, eps=None,
                   min_grad_screen=None, max_resamples=300):
    """Max grad_check error over n conditioned random instances.

    ``build(rng)`` returns (f, params). When ``min_grad_screen`` is set,
    instances whose smallest analytic gradient coordinate falls below it are
    resampled; their gradients sit below the finite-difference noise floor,
    where the oracle carries no information.
    """
    errs = []
    attempt = 0
    with T.use_dtype(dtype):
        while len(errs) < n_instances:
            if attempt >= max_resamples:
                raise RuntimeError("screen rejected too many instances")
            rng = np.random.default_rng([int(np.dtype(dtype).itemsize), attempt])
            attempt += 1
            f, params = build(rng)
            if min_grad_screen is not None:
                T.reset_tape()
                for p in params:
                    p.grad = None
                T.backward(f())
                if min(np.abs(p.grad).min() for p in params) < min_grad_screen:
                    continue
            errs.append(T.grad_check(f, params, eps=eps))
    return max(errs)


@pytest.fixture(autouse=True)
def fresh_tape():
    T.reset_tape()
    yield
    T.reset_tape()
