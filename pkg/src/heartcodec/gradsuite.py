"""Finite-difference verification of every differentiable op and of M5 end to end."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import BatchNormState, Tensor, grad_check, precision
from .autograd.gradcheck import DEFAULT_STEP, grad_check_report
from .autograd.ops import (
    batchnorm1d,
    conv1d,
    global_avg_pool,
    linear,
    maxpool1d,
    mul,
    relu,
    softmax_cross_entropy,
)
from .autograd.ops import sum as tsum
from .m5 import TINY_ARCH, ModelParams, build_m5, forward

TOLERANCE = {32: 1e-3, 64: 1e-4}
# The oracle runs in extended precision, so the end-to-end check can use a
# step small enough to rarely straddle a relu/maxpool kink in either mode.
MODEL_STEP = 1e-6


@dataclass
class CheckResult:
    name: str
    bits: int
    seed: int
    max_rel_error: float
    tolerance: float
    skipped: int = 0
    norm_rel_error: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def _weighted(out: Tensor, rng) -> Tensor:
    # random projection makes every output coordinate matter
    return tsum(mul(out, Tensor(rng.standard_normal(out.shape))))


def _pool_mask(x: np.ndarray, window: int, gap: float) -> np.ndarray:
    """True where the window's winner is separated from the runner-up by > ``gap``."""
    B, C, L = x.shape
    lout = L // window
    blocks = np.sort(x[:, :, : lout * window].reshape(B, C, lout, window), axis=3)
    ok = (blocks[..., -1] - blocks[..., -2]) > gap if window > 1 else np.ones((B, C, lout), bool)
    mask = np.zeros_like(x, dtype=bool)
    mask[:, :, : lout * window] = np.repeat(ok, window, axis=2)
    mask[:, :, lout * window :] = True
    return mask


def op_checks(seed: int, bits: int) -> list[CheckResult]:
    """Gradient checks of each op on randomly shaped inputs."""
    tol = TOLERANCE[bits]
    h = DEFAULT_STEP[bits]
    rng = np.random.default_rng([seed, bits])
    results = []

    def T(*shape, scale=1.0):
        return Tensor(scale * rng.standard_normal(shape))

    def record(name, err):
        results.append(CheckResult(name, bits, seed, err, tol))

    with precision(bits):
        B, cin, cout = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 5)
        K, stride = rng.integers(1, 6), rng.integers(1, 4)
        L = K + rng.integers(0, 16)
        x, w, b = T(B, cin, L), T(cout, cin, K), T(cout)
        lout = (L - K) // stride + 1
        proj = Tensor(rng.standard_normal((B, cout, lout)))
        record("conv1d/input", grad_check(lambda t: tsum(mul(conv1d(t, w, b, stride), proj)), x))
        record("conv1d/weight", grad_check(lambda t: tsum(mul(conv1d(x, t, b, stride), proj)), w))
        record("conv1d/bias", grad_check(lambda t: tsum(mul(conv1d(x, w, t, stride), proj)), b))

        B, C, L = rng.integers(2, 4), rng.integers(1, 4), rng.integers(2, 9)
        xb, gamma, beta = T(B, C, L), T(C), T(C)
        proj = Tensor(rng.standard_normal((B, C, L)))

        def bn(inp, g, be, mode="train"):
            st = BatchNormState(C, inp.dtype)
            st.running_mean[...] = 0.1
            st.running_var[...] = 1.5
            return tsum(mul(batchnorm1d(inp, g, be, st, mode), proj))

        record("batchnorm1d/input", grad_check(lambda t: bn(t, gamma, beta), xb))
        record("batchnorm1d/gamma", grad_check(lambda t: bn(xb, t, beta), gamma))
        record("batchnorm1d/beta", grad_check(lambda t: bn(xb, gamma, t), beta))
        record("batchnorm1d/input[eval]", grad_check(lambda t: bn(t, gamma, beta, "eval"), xb))

        xr = T(2, 3, 11)
        proj = Tensor(rng.standard_normal(xr.shape))
        # kink exclusion: only coordinates with |x| > 10h
        record("relu", grad_check(lambda t: tsum(mul(relu(t), proj)), xr, mask=np.abs(xr.data) > 10 * h))

        window = int(rng.integers(1, 5))
        xp = T(2, 2, window * int(rng.integers(1, 6)) + int(rng.integers(0, window)))
        proj = Tensor(rng.standard_normal((2, 2, xp.shape[2] // window)))
        record(
            "maxpool1d",
            grad_check(lambda t: tsum(mul(maxpool1d(t, window), proj)), xp, mask=_pool_mask(xp.data, window, 10 * h)),
        )

        xg = T(2, 3, int(rng.integers(1, 9)))
        proj = Tensor(rng.standard_normal((2, 3)))
        record("global_avg_pool", grad_check(lambda t: tsum(mul(global_avg_pool(t), proj)), xg))

        F, O = rng.integers(1, 9), rng.integers(1, 6)
        xl, wl, bl = T(3, F), T(O, F), T(O)
        proj = Tensor(rng.standard_normal((3, O)))
        record("linear/input", grad_check(lambda t: tsum(mul(linear(t, wl, bl), proj)), xl))
        record("linear/weight", grad_check(lambda t: tsum(mul(linear(xl, t, bl), proj)), wl))
        record("linear/bias", grad_check(lambda t: tsum(mul(linear(xl, wl, t), proj)), bl))

        logits = T(4, 5, scale=2.0)
        labels = rng.integers(0, 5, size=4)
        record("softmax_cross_entropy", grad_check(lambda t: softmax_cross_entropy(t, labels), logits))
    return results


def model_checks(
    seed: int,
    bits: int,
    arch=TINY_ARCH,
    batch: int = 2,
    h: float | None = None,
    mode: str = "train",
) -> list[CheckResult]:
    """End-to-end check of the shrunk M5: loss gradient w.r.t. input and every parameter.

    Coordinates whose finite-difference stencil flips a relu or maxpool branch
    are skipped (the end-to-end analogue of the relu kink exclusion).  In
    ``mode="eval"`` BN uses randomized running statistics, which gives the conv
    biases a nonzero gradient; in train mode BN cancels them exactly.
    """
    tol = TOLERANCE[bits]
    h = MODEL_STEP if h is None else h
    rng = np.random.default_rng([seed, bits, 5])
    results = []
    with precision(bits):
        model = build_m5(arch.num_classes, seed=seed, arch=arch)
        # fresh models have a zero classifier; randomize it so gradients reach every layer
        for name in ("classifier.weight", "classifier.bias"):
            p = model.params[name]
            p.data[...] = rng.uniform(-0.5, 0.5, size=p.shape)
        x = Tensor(rng.standard_normal((batch, arch.in_channels, arch.input_len)))
        y = rng.integers(0, arch.num_classes, size=batch)
        stats = [
            (rng.uniform(-0.3, 0.3, st.running_mean.shape), rng.uniform(0.5, 2.0, st.running_var.shape))
            for st in model.bn
        ]

        def loss_with(name=None):
            def f(t):
                params = dict(model.params)
                inp = x
                if name is None:
                    inp = t
                else:
                    params[name] = t
                bn = []
                for st, (mean, var) in zip(model.bn, stats):
                    fresh = BatchNormState(st.running_mean.shape[0], t.dtype)
                    if mode == "eval":
                        fresh.running_mean[...] = mean
                        fresh.running_var[...] = var
                    bn.append(fresh)
                return softmax_cross_entropy(forward(ModelParams(arch, params, bn), inp, mode), y)

            return f

        tag = "m5" if mode == "train" else "m5[eval]"
        targets = [("input", None, x)] + [(n, n, p) for n, p in model.params.items()]
        for label, name, base in targets:
            probe = Tensor(base.data.copy(), dtype=base.dtype)
            rep = grad_check_report(loss_with(name), probe, h, skip_kinks=True)
            results.append(
                CheckResult(
                    f"{tag}/{label}", bits, seed, rep.max_rel_error, tol, rep.skipped_kinks, rep.norm_rel_error
                )
            )
    return results


def run_suite(bits: int, seeds=range(20), include_model: bool = True) -> list[CheckResult]:
    results = []
    for seed in seeds:
        results.extend(op_checks(seed, bits))
        if include_model:
            results.extend(model_checks(seed, bits))
    return results


def summarize(results: list[CheckResult]) -> dict[str, tuple[float, float, bool]]:
    """Worst error per check name: name -> (max error, tolerance, passed)."""
    out: dict[str, tuple[float, float, bool]] = {}
    for r in results:
        worst = max(out.get(r.name, (0.0, r.tolerance, True))[0], r.max_rel_error)
        out[r.name] = (worst, r.tolerance, worst <= r.tolerance)
    return out
