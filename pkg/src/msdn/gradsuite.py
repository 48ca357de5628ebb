"""Finite-difference check of every differentiable op on random instances."""
import numpy as np

from .nn import batch_norm, conv2d, conv_transpose_2x2, max_pool_2x2
from .objectives import BoxTargets, dice_loss, focal_loss, smooth_l1
from .se import cse, sse_binary, sse_unary
from .tensor import channel_softmax, gradcheck, mul, relu, sigmoid, tsum

TOLERANCE = 1e-4


class _Readout:
    """Fixed random linear functional; weights drawn once, on first use."""

    def __init__(self, rng):
        self.rng, self.w = rng, None

    def __call__(self, out):
        if self.w is None:
            self.w = self.rng.normal(size=out.shape)
        return tsum(mul(out, self.w))


def _targets(rng, n, classes=1):
    state = rng.choice(np.array([-1, 0, 1], dtype=np.int8), size=n)
    state[0] = 1
    return BoxTargets(state, (rng.random((n, classes)) > 0.5).astype(np.float64),
                      rng.normal(size=(n, 4)), np.zeros(n, dtype=np.int64))


def _away_from_kinks(x, spacing=1e-3):
    # nudge values near 0 so the finite-difference step never straddles the relu kink
    return np.where(np.abs(x) < spacing, x + np.sign(x + 1e-300) * 2 * spacing, x)


def _pool_input(rng, shape):
    # distinct values with gaps well above eps keep the argmax stable under perturbation
    flat = rng.permutation(int(np.prod(shape))).astype(np.float64) / 10
    return flat.reshape(shape)


def _case(name, rng):
    r = rng.normal
    _readout = _Readout(np.random.default_rng(rng.integers(2**32)))
    if name == "elementwise":
        a, b = r(size=(2, 3, 4)), r(size=(2, 1, 4))
        return lambda x, y: _readout(mul(x + y, x - y * 0.5) / (2.0 + mul(y, y))), (a, b)
    if name == "sigmoid":
        return lambda x: _readout(sigmoid(x)), (r(size=(3, 5)) * 3,)
    if name == "relu":
        return lambda x: _readout(relu(x)), (_away_from_kinks(r(size=(3, 5))),)
    if name == "softmax":
        return lambda x: _readout(channel_softmax(x, axis=1)), (r(size=(2, 4, 3, 3)) * 2,)
    if name.startswith("conv2d"):
        d = int(name[-1])
        size = 2 * d + 3
        x, w, b = r(size=(1, 2, size, size)), r(size=(3, 2, 3, 3)), r(size=3)
        return lambda xx, ww, bb: _readout(conv2d(xx, ww, bb, padding=d, dilation=d)), (x, w, b)
    if name == "batch_norm":
        x, g, b = r(size=(2, 3, 3, 3)), r(size=3), r(size=3)
        train = bool(rng.integers(0, 2))
        rm, rv = r(size=3), rng.uniform(0.5, 2, 3)
        return (lambda xx, gg, bb: _readout(batch_norm(xx, gg, bb, rm.copy(), rv.copy(), train))), (x, g, b)
    if name == "max_pool":
        return lambda x: _readout(max_pool_2x2(x)), (_pool_input(rng, (1, 2, 4, 4)),)
    if name == "upsample":
        x, w, b = r(size=(1, 3, 2, 3)), r(size=(2, 3, 2, 2)), r(size=2)
        return lambda xx, ww, bb: _readout(conv_transpose_2x2(xx, ww, bb)), (x, w, b)
    if name == "sse_unary":
        return lambda u, w: _readout(sse_unary(u, w)), (r(size=(2, 3, 3, 3)), r(size=(1, 3, 1, 1)))
    if name == "sse_binary":
        args = (r(size=(1, 2, 3, 3)), r(size=(1, 4, 3, 3)), r(size=(1, 4, 1, 1)))
        return lambda a, b, w: _readout(sse_binary(a, b, w)), args
    if name == "cse":
        args = (r(size=(2, 4, 3, 3)), r(size=(2, 4)), r(size=(4, 2)))
        return lambda u, a, b: _readout(cse(u, a, b)), args
    if name == "dice_loss":
        mask = rng.integers(0, 3, size=(2, 4, 4))
        return lambda z: dice_loss(channel_softmax(z, axis=1), mask), (r(size=(2, 3, 4, 4)),)
    if name == "focal_loss":
        t = _targets(rng, 8, 2)
        gamma = float(rng.choice([0.0, 1.0, 2.0]))
        return lambda p: focal_loss(p, t, gamma=gamma), (rng.uniform(0.05, 0.95, (8, 2)),)
    if name == "smooth_l1":
        t = _targets(rng, 8)
        pred = t.offsets + rng.uniform(0.01, 3, (8, 4)) * rng.choice([-1, 1], size=(8, 4))
        # keep residuals clear of the |d| = beta joint
        resid = pred - t.offsets
        pred = np.where(np.abs(np.abs(resid) - 1) < 1e-3, pred + 0.01, pred)
        return lambda x: smooth_l1(x, t), (pred,)
    raise KeyError(name)


OPS = ("elementwise", "sigmoid", "relu", "softmax", "conv2d_d1", "conv2d_d2", "conv2d_d4", "batch_norm",
       "max_pool", "upsample", "sse_unary", "sse_binary", "cse", "dice_loss", "focal_loss", "smooth_l1")


def run_suite(instances=20, seed=0, ops=OPS):
    """Returns ``{op: max relative error}`` over ``instances`` random draws per op."""
    results = {}
    for k, name in enumerate(ops):
        rng = np.random.default_rng([seed, k])
        worst = 0.0
        for _ in range(instances):
            fn, inputs = _case(name, rng)
            worst = max(worst, gradcheck(fn, *inputs))
        results[name] = worst
    return results


def suite_passes(results, tol=TOLERANCE):
    return all(v <= tol for v in results.values())
