"""Finite-difference checks for every differentiable op and for the full training loss.

Each registry entry builds a scalar objective from random inputs. The
analytic gradient of every input is compared with central differences.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import loss as L
from .autodiff import Tensor
from .model import EncoderSpec, StudentTeacher, encode

TOLERANCE = 1e-5
EPS = 1e-5


def _weighted(out: Tensor, weight_seed: int) -> Tensor:
    """Contract an op output with fixed random weights so every entry matters."""
    w = Tensor(np.random.Generator(np.random.Philox(weight_seed)).normal(size=out.shape))
    return ad.sum(ad.mul(out, w)) if out.values.ndim else ad.mul(out, w)


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _unary(op, make=None):
    def build(rng):
        x = make(rng) if make else rng.normal(size=(4, 3))
        ws = int(rng.integers(1 << 30))
        return (lambda a: _weighted(op(a), ws)), [x]

    return build


def _binary(op, shape_a=(4, 3), shape_b=(4, 3)):
    def build(rng):
        ws = int(rng.integers(1 << 30))
        return (lambda a, b: _weighted(op(a, b), ws)), [rng.normal(size=shape_a), rng.normal(size=shape_b)]

    return build


def _loss_case(kind):
    def build(rng):
        up, u = rng.normal(size=(8, 16)), rng.normal(size=(8, 16))
        sets = L.mine_hard_negatives(up, u, threshold=40.0)
        if kind == "positive_loss":
            return (lambda a, b: L.positive_loss(a, b)), [u, up]
        return (lambda a, b: L.negative_loss(b, a, sets)), [u, up]

    return build


def _full_loss(rng):
    """Weighted training loss through a residual encoder, w.r.t. every teacher parameter."""
    spec = EncoderSpec(kind="mlp", input_dim=16, hidden=8, n_blocks=1, rep_dim=6)
    st = StudentTeacher.create(spec, int(rng.integers(1 << 30)), 0.5)
    raw = rng.normal(size=(8, 16))
    aug = raw + 0.3 * rng.normal(size=raw.shape)
    names = st.teacher.names()
    u_prime = ad.detach(encode(st.student, spec, raw))
    thr = float(np.median(L.dissim_matrix_values(u_prime.values, encode(st.teacher, spec, aug).values))) + 1.0

    def f(*params):
        t = st.teacher.copy(trainable=False)
        for n, p in zip(names, params):
            t[n] = p
        return L.total_loss(encode(t, spec, aug), u_prime, threshold=thr).loss

    return f, st.teacher.arrays()


CASES: dict = {
    "add": _binary(ad.add),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "mul_scalar": _binary(ad.mul, shape_b=()),
    "square": _unary(ad.square),
    "log": _unary(ad.log, lambda r: r.uniform(0.5, 2.0, size=(4, 3))),
    "relu": _unary(ad.relu, lambda r: _away_from_zero(r, (4, 3))),
    "matmul": _binary(ad.matmul, (4, 3), (3, 5)),
    "tile_rows": _unary(lambda a: ad.tile_rows(a, 4), lambda r: r.normal(size=(3,))),
    "reshape": _unary(lambda a: ad.reshape(a, (3, 4))),
    "take_rows": _unary(lambda a: ad.take_rows(a, [2, 0, 2])),
    "sum": _unary(lambda a: ad.sum(a, axis=1)),
    "mean": _unary(lambda a: ad.mean(a, axis=0)),
    "max_abs": _unary(lambda a: ad.reduce("max_abs", a, axis=1)),
    "inf_norm_normalize": _unary(ad.inf_norm_normalize),
    "pairwise_sqdist": _binary(ad.pairwise_sqdist, (4, 3), (5, 3)),
    "conv2d": _binary(lambda x, w: ad.conv2d(x, w, stride=2, pad=1), (2, 3, 5, 5), (4, 3, 3, 3)),
    "add_channel_bias": _binary(ad.add_channel_bias, (2, 3, 2, 2), (3,)),
    "softmax_cross_entropy": _unary(lambda a: ad.softmax_cross_entropy(a, [0, 2, 1, 2])),
    "positive_loss": _loss_case("positive_loss"),
    "negative_loss": _loss_case("negative_loss"),
    "total_loss": _full_loss,
}


@dataclass
class CaseResult:
    name: str
    trials: int
    worst_rel_error: float

    @property
    def passed(self) -> bool:
        return self.worst_rel_error < TOLERANCE


def check_case(name: str, trials: int = 3, seed: int = 0, eps: float = EPS) -> CaseResult:
    build: Callable = CASES[name]
    worst = 0.0
    for trial in range(trials):
        rng = np.random.Generator(np.random.Philox([seed, trial]))
        f, arrays = build(rng)
        inputs = [Tensor(a.copy(), trainable=True) for a in arrays]
        ad.backward(f(*inputs))
        for k, (t, base) in enumerate(zip(inputs, arrays)):

            def partial(x, k=k):
                args = [Tensor(a) for a in arrays]
                args[k] = x
                return f(*args)

            analytic = t.grad if t.grad is not None else np.zeros_like(base)
            worst = max(worst, ad.rel_error(analytic, ad.finite_diff_grad(partial, base, eps)))
    return CaseResult(name, trials, worst)


def run_gradcheck(ops="all", trials: int = 3, seed: int = 0) -> list:
    names = list(CASES) if ops == "all" else [ops] if isinstance(ops, str) else list(ops)
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise KeyError(", ".join(unknown))
    return [check_case(n, trials, seed) for n in names]


def format_table(results) -> str:
    width = max(len(r.name) for r in results)
    rows = [f"{'op':<{width}}  trials  worst_rel_err  status"]
    for r in results:
        rows.append(f"{r.name:<{width}}  {r.trials:>6}  {r.worst_rel_error:>13.3e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(rows)
