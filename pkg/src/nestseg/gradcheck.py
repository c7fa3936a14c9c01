"""Central finite-difference gradient checks in float64.

Each case builds a scalar function of some float64 leaves (inputs and/or a
module's parameters). The analytic gradient from :func:`backward` is compared
against ``(f(x+h) - f(x-h)) / 2h`` on a sample of coordinates using the
relative error ``|a - f| / max(|a|, |f|, 1e-8)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import losses, ops
from .blocks import (AttentionGate, AttentionModule, ChannelAttention, ConvBlock,
                     EdgeEnhancement, NestedUNetBlock, NubSpec)
from .nn import BatchNorm2d, Module
from .tensor import Tensor, backward, no_grad, record_branches

STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    checked: int
    skipped: int = 0
    worst: str = ""

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error < TOLERANCE

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f", {self.skipped} skipped at kinks" if self.skipped else ""
        line = (f"{status}  {self.name:<28} max rel err {self.max_rel_error:.2e} "
                f"over {self.checked} coords{extra}")
        return line if self.passed else f"{line}\n      worst: {self.worst}"


def rel_error(a: float, f: float) -> float:
    return abs(a - f) / max(abs(a), abs(f), 1e-8)


def _same_branches(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _evaluate(fn: Callable[[], Tensor]) -> tuple[float, list[np.ndarray]]:
    with no_grad(), record_branches() as log:
        value = fn().item()
    return value, log


def check(name: str, fn: Callable[[], Tensor], leaves: Sequence[Tensor],
          rng: np.random.Generator, per_leaf: int = 8, step: float = STEP) -> GradCheckResult:
    """Compare analytic and numeric gradients of the scalar ``fn()`` w.r.t. ``leaves``.

    ``fn`` must read the leaves' ``.data`` on every call (it is re-run with
    perturbed values). A coordinate whose +h and -h evaluations take a
    different branch of some piecewise op (LeakyReLU side, max argument,
    clip range) than the unperturbed pass is skipped and another one is
    drawn, since the difference quotient there straddles a kink.
    """
    for t in leaves:
        t.grad = None
        t.requires_grad = True
    with record_branches() as base:
        out = fn()
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in leaves]
    worst, count, skipped, where = 0.0, 0, 0, ""
    for k, (t, grad) in enumerate(zip(leaves, analytic)):
        done = 0
        for j in rng.permutation(t.size):
            if done == per_leaf:
                break
            idx = np.unravel_index(j, t.shape)
            old = t.data[idx]
            t.data[idx] = old + step
            fp, log_p = _evaluate(fn)
            t.data[idx] = old - step
            fm, log_m = _evaluate(fn)
            t.data[idx] = old
            if not (_same_branches(base, log_p) and _same_branches(base, log_m)):
                skipped += 1
                continue
            a, f = float(grad[idx]), (fp - fm) / (2 * step)
            err = rel_error(a, f)
            if err > worst:
                worst = err
                where = f"leaf {k} {tuple(int(i) for i in idx)} analytic {a:.8g} numeric {f:.8g}"
            done += 1
        count += done
    return GradCheckResult(name, worst, count, skipped, where)


def randomize(module: Module, rng: np.random.Generator) -> Module:
    """Cast to float64 and move every parameter off its initial value.

    Weights are jittered around their initialised scale; biases, batchnorm
    shifts and scales get generic values. Scales are drawn away from zero so
    no unit sits exactly on the LeakyReLU kink (zero-initialised scales would),
    and away from the large weights that make batch statistics so curved that
    a 1e-5 central difference is no longer accurate.
    """
    module.to(np.float64)
    for m in module.modules():
        for name, p in m._params.items():
            if isinstance(m, BatchNorm2d):
                p.data[...] = rng.uniform(0.5, 1.5, p.shape) if name == "gamma" else rng.normal(0.0, 0.1, p.shape)
            elif p.ndim == 1:
                p.data[...] = rng.normal(0.0, 0.1, p.shape)
            else:
                p.data[...] = p.data * rng.uniform(0.8, 1.2, p.shape)
    return module


def module_case(name: str, module: Module, input_shapes: Sequence[tuple[int, ...]],
                rng: np.random.Generator, per_leaf: int = 4) -> GradCheckResult:
    randomize(module, rng).train()
    xs = [Tensor(rng.normal(size=s)) for s in input_shapes]
    probe = module(*xs)
    weights = Tensor(rng.normal(size=probe.shape))

    def fn():
        return ops.sum(module(*xs) * weights)

    return check(name, fn, [p for p in module.parameters()] + xs, rng, per_leaf)


def _op_cases(rng: np.random.Generator) -> list[tuple[str, Callable, list[tuple[int, ...]]]]:
    rm = np.zeros(3)
    rv = np.ones(3)
    return [
        ("conv2d", lambda x, w, b: ops.conv2d(x, w, b), [(2, 3, 5, 5), (4, 3, 3, 3), (4,)]),
        ("conv2d dilation 2", lambda x, w: ops.conv2d(x, w, None, dilation=2), [(2, 2, 6, 6), (3, 2, 3, 3)]),
        ("conv2d stride 2 valid", lambda x, w: ops.conv2d(x, w, None, stride=2, padding="valid"),
         [(1, 2, 7, 7), (3, 2, 3, 3)]),
        ("depthwise separable", lambda x, d, p, b: ops.depthwise_separable_conv(x, d, p, b),
         [(2, 2, 4, 4), (2, 1, 3, 3), (3, 2, 1, 1), (3,)]),
        ("maxpool2", ops.maxpool2, [(2, 2, 4, 6)]),
        ("upsample2 bilinear", lambda x: ops.upsample2(x, "bilinear"), [(1, 2, 3, 4)]),
        ("upsample2 nearest", lambda x: ops.upsample2(x, "nearest"), [(1, 2, 3, 4)]),
        ("resize bilinear", lambda x: ops.resize_bilinear(x, (8, 8)), [(1, 1, 2, 2)]),
        ("batchnorm train", lambda x, g, b: ops.batchnorm(x, g, b, rm.copy(), rv.copy(), True),
         [(2, 3, 3, 3), (3,), (3,)]),
        ("batchnorm infer", lambda x, g, b: ops.batchnorm(x, g, b, rm + 0.3, rv * 2.0, False),
         [(2, 3, 3, 3), (3,), (3,)]),
        ("leaky_relu", lambda x: ops.leaky_relu(x, 0.01), [(3, 7)]),
        ("swish", ops.swish, [(3, 7)]),
        ("sigmoid", ops.sigmoid, [(3, 7)]),
        ("softmax", lambda x: ops.softmax(x, axis=-1), [(3, 7)]),
        ("dense", lambda x, w, b: ops.dense(x, w, b), [(2, 5, 4), (4, 3), (3,)]),
        ("matmul", ops.matmul, [(2, 3, 4), (2, 4, 5)]),
        ("concat", lambda a, b: ops.concat([a, b], axis=1), [(2, 2, 3, 3), (2, 3, 3, 3)]),
        ("global avg pool", ops.global_avg_pool, [(2, 3, 4, 4)]),
        ("global max pool", ops.global_max_pool, [(2, 3, 4, 4)]),
        ("mean over axes", lambda x: ops.mean(x, axis=(0, 2)), [(2, 3, 4)]),
        ("sqrt", lambda x: ops.sqrt(ops.square(x) + 1.0), [(3, 4)]),
        ("elementwise add/mul", lambda a, b: a * b + a, [(2, 3, 4, 4), (1, 3, 1, 1)]),
        ("scaled dot attention", lambda q, k, v: ops.scaled_dot_attention(q, k, v, 0.5, chunk=3),
         [(2, 7, 4), (2, 7, 4), (2, 7, 4)]),
        ("sobel", lambda x: ops.concat(list(ops.sobel(x)), axis=1), [(1, 2, 5, 5)]),
    ]


def op_suite(rng: np.random.Generator) -> list[GradCheckResult]:
    results = []
    for name, fn, shapes in _op_cases(rng):
        leaves = [Tensor(rng.normal(size=s)) for s in shapes]
        weights = Tensor(rng.normal(size=fn(*leaves).shape))
        results.append(check(name, lambda fn=fn, leaves=leaves: ops.sum(fn(*leaves) * weights),
                             leaves, rng))
    return results


def block_suite(rng: np.random.Generator) -> list[GradCheckResult]:
    mk = np.random.default_rng(11)
    results = [
        module_case("conv_block", ConvBlock(2, 3, mk), [(1, 2, 4, 4)], rng),
        module_case("attention_gate", AttentionGate(2, 3, mk), [(2, 2, 4, 4), (2, 3, 4, 4)], rng),
        module_case("channel attention", ChannelAttention(4, mk), [(2, 4, 4, 4)], rng),
        module_case("attention module", AttentionModule(2, 2, mk), [(2, 2, 3, 3), (2, 2, 3, 3)], rng),
        module_case("edge enhancement", EdgeEnhancement("residual"), [(2, 2, 5, 5)], rng),
        module_case("edge magnitude", EdgeEnhancement("magnitude"), [(1, 1, 5, 5)], rng),
        module_case("NUB-bridge", NestedUNetBlock(NubSpec(4, 2, 2, is_bridge=True), mk),
                    [(2, 2, 4, 4)], rng, per_leaf=2),
    ]
    for depth in (4, 5, 6, 7):
        size = 2 ** (depth - 1)  # deepest level is 2x2
        # two input channels: with one, the first pointwise weight is cancelled
        # by the following batchnorm and its true gradient is roundoff-sized
        results.append(module_case(f"NUB-{depth}", NestedUNetBlock(NubSpec(depth, 2, 2), mk),
                                   [(2, 2, size, size)], rng, per_leaf=2))
    return results


def loss_suite(rng: np.random.Generator) -> list[GradCheckResult]:
    shape = (2, 1, 6, 6)
    y = np.zeros(shape)
    y[:, :, 1:4, 2:5] = 1.0
    results = []
    for kind in losses.LOSS_KINDS:
        cfg = losses.LossConfig(kind=kind)
        logits = Tensor(rng.normal(size=shape))
        results.append(check(f"loss {kind}",
                             lambda cfg=cfg, logits=logits: losses.compute_loss(cfg, y, ops.sigmoid(logits)),
                             [logits], rng, per_leaf=12))
    return results


def run_all(seed: int = 0) -> list[GradCheckResult]:
    rng = np.random.default_rng(seed)
    return op_suite(rng) + block_suite(rng) + loss_suite(rng)


def summarize(results: Iterable[GradCheckResult]) -> str:
    return "\n".join(str(r) for r in results)
