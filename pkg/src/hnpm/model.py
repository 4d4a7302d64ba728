"""Residual encoders and the teacher/student pair.

Naming follows the method literally: the *teacher* is trained by gradient,
the *student* tracks it by exponential moving average and never receives
gradients (unless the student-gradient ablation is switched on).
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError


@dataclass
class EncoderSpec:
    kind: str = "mlp"  # "mlp" for vectors, "conv" for (3, H, W) images
    input_dim: int = 32
    image_shape: Optional[tuple] = None
    hidden: int = 64
    n_blocks: int = 1
    rep_dim: int = 16

    def __post_init__(self):
        if self.kind not in ("mlp", "conv"):
            raise ConfigError(f"unknown encoder kind {self.kind!r}")
        if self.rep_dim < 2:
            raise ConfigError("rep_dim must be at least 2")
        if self.hidden < 1 or self.n_blocks < 0:
            raise ConfigError("hidden must be positive and n_blocks non-negative")
        if self.kind == "mlp" and self.input_dim < 1:
            raise ConfigError("input_dim must be positive")
        if self.kind == "conv":
            if self.image_shape is None:
                raise ConfigError("conv encoder needs image_shape")
            self.image_shape = tuple(int(v) for v in self.image_shape)
            if len(self.image_shape) != 3 or min(self.image_shape) < 1:
                raise ConfigError(f"bad image_shape {self.image_shape}")

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["image_shape"] is not None:
            d["image_shape"] = list(d["image_shape"])
        return d


class ParamSet:
    """Ordered name -> Tensor mapping holding one encoder's parameters."""

    def __init__(self, tensors=None):
        self._t: "OrderedDict[str, Tensor]" = OrderedDict(tensors or ())

    def __getitem__(self, name) -> Tensor:
        return self._t[name]

    def __setitem__(self, name, t: Tensor):
        self._t[name] = t

    def __iter__(self) -> Iterator[str]:
        return iter(self._t)

    def __len__(self):
        return len(self._t)

    def names(self) -> list:
        return list(self._t)

    def items(self):
        return self._t.items()

    def tensors(self) -> list:
        return list(self._t.values())

    def arrays(self) -> list:
        return [t.values for t in self._t.values()]

    def grads(self) -> list:
        return [np.zeros_like(t.values) if t.grad is None else t.grad for t in self._t.values()]

    def zero_grad(self):
        for t in self._t.values():
            t.grad = None

    def set_trainable(self, flag: bool):
        for t in self._t.values():
            t.trainable = flag

    def copy(self, trainable: Optional[bool] = None) -> "ParamSet":
        return ParamSet(
            (n, Tensor(t.values.copy(), trainable=t.trainable if trainable is None else trainable))
            for n, t in self._t.items()
        )

    def same_layout(self, other: "ParamSet") -> bool:
        return self.names() == other.names() and all(self[n].shape == other[n].shape for n in self)

    def equal(self, other: "ParamSet") -> bool:
        return self.same_layout(other) and all(np.array_equal(self[n].values, other[n].values) for n in self)


def _layers(spec: EncoderSpec):
    """Yield (name, shape, fan_in) for every parameter in forward order."""
    h = spec.hidden
    if spec.kind == "mlp":
        yield "in.w", (spec.input_dim, h), spec.input_dim
        yield "in.b", (h,), None
        for i in range(spec.n_blocks):
            yield f"block{i}.a.w", (h, h), h
            yield f"block{i}.a.b", (h,), None
            yield f"block{i}.b.w", (h, h), h
            yield f"block{i}.b.b", (h,), None
    else:
        c = spec.image_shape[0]
        yield "stem.w", (h, c, 3, 3), c * 9
        yield "stem.b", (h,), None
        for i in range(spec.n_blocks):
            yield f"block{i}.a.w", (h, h, 3, 3), h * 9
            yield f"block{i}.a.b", (h,), None
            yield f"block{i}.b.w", (h, h, 3, 3), h * 9
            yield f"block{i}.b.b", (h,), None
    yield "out.w", (h, spec.rep_dim), h
    yield "out.b", (spec.rep_dim,), None


def init_params(spec: EncoderSpec, seed: int, trainable: bool = True) -> ParamSet:
    """He-uniform weights (variance 2 / fan_in) and zero biases."""
    rng = np.random.Generator(np.random.Philox(int(seed)))
    ps = ParamSet()
    for name, shape, fan_in in _layers(spec):
        if min(shape) < 1:
            raise ConfigError(f"zero-width layer {name} {shape}")
        if fan_in is None:
            vals = np.zeros(shape)
        else:
            bound = math.sqrt(6.0 / fan_in)
            vals = rng.uniform(-bound, bound, size=shape)
        ps[name] = Tensor(vals, trainable=trainable)
    return ps


def _linear(h: Tensor, p: ParamSet, prefix: str) -> Tensor:
    return ad.add(ad.matmul(h, p[prefix + ".w"]), ad.tile_rows(p[prefix + ".b"], h.shape[0]))


def _conv(h: Tensor, p: ParamSet, prefix: str, stride: int = 1) -> Tensor:
    return ad.add_channel_bias(ad.conv2d(h, p[prefix + ".w"], stride=stride, pad=1), p[prefix + ".b"])


def encode(params: ParamSet, spec: EncoderSpec, batch) -> Tensor:
    """Map an input batch to its N x rep_dim representation."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if spec.kind == "mlp":
        if x.values.ndim != 2 or x.shape[1] != spec.input_dim:
            raise ShapeError(f"expected N x {spec.input_dim} input, got {x.shape}")
        h = ad.relu(_linear(x, params, "in"))
        for i in range(spec.n_blocks):
            r = _linear(ad.relu(_linear(h, params, f"block{i}.a")), params, f"block{i}.b")
            h = ad.relu(ad.add(h, r))
        return _linear(h, params, "out")
    if x.values.ndim != 4 or tuple(x.shape[1:]) != spec.image_shape:
        raise ShapeError(f"expected N x {spec.image_shape} images, got {x.shape}")
    h = ad.relu(_conv(x, params, "stem", stride=2))
    for i in range(spec.n_blocks):
        r = _conv(ad.relu(_conv(h, params, f"block{i}.a")), params, f"block{i}.b")
        h = ad.relu(ad.add(h, r))
    n, c = h.shape[:2]
    pooled = ad.mean(ad.reshape(h, (n, c, -1)), axis=2)
    return _linear(pooled, params, "out")


@dataclass
class StudentTeacher:
    spec: EncoderSpec
    teacher: ParamSet
    student: ParamSet
    tau: float = 0.5

    def __post_init__(self):
        check_tau(self.tau)
        if not self.teacher.same_layout(self.student):
            raise ShapeError("teacher and student parameter layouts differ")

    @classmethod
    def create(cls, spec: EncoderSpec, seed: int, tau: float = 0.5) -> "StudentTeacher":
        teacher = init_params(spec, seed, trainable=True)
        return cls(spec, teacher, teacher.copy(trainable=False), tau)


def check_tau(tau: float):
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"tau must lie in [0, 1], got {tau}")


def ema_update(st: StudentTeacher, tau: Optional[float] = None) -> ParamSet:
    """Move every student tensor to ``tau * student + (1 - tau) * teacher``."""
    tau = st.tau if tau is None else tau
    check_tau(tau)
    for name in st.student:
        s = st.student[name]
        s.values = ema_blend(s.values, st.teacher[name].values, tau)
    return st.student


def ema_blend(student: np.ndarray, teacher: np.ndarray, tau: float) -> np.ndarray:
    out = tau * student + (1.0 - tau) * teacher
    # entries already at the fixed point stay there exactly
    return np.where(student == teacher, student, out)


def two_view_forward(st: StudentTeacher, raw_batch, aug_batch, block_student_grad: bool = True):
    """Teacher sees the augmented view, student the raw view.

    Returns ``(U, U_prime)``; with ``block_student_grad`` the student output
    is detached so backward never reaches student parameters.
    """
    u = encode(st.teacher, st.spec, aug_batch)
    u_prime = encode(st.student, st.spec, raw_batch)
    if block_student_grad:
        u_prime = ad.detach(u_prime)
    return u, u_prime
