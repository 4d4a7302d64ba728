"""Training loop: Adam on the teacher, global-norm clipping, EMA student."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import yaml

from . import autodiff as ad
from .augment import AugmentConfig, RngStream, augment_batch, normalize_batch, vector_jitter
from .data import BatchPlan, Dataset, batches, load_dataset
from .errors import ConfigError, ContractError, DegenerateBatchError, DegenerateRepresentationError
from .loss import LossBreakdown, check_alphas, total_loss
from .model import EncoderSpec, ParamSet, StudentTeacher, ema_update

log = logging.getLogger(__name__)

DESK_DATASET = {"kind": "synthetic", "k": 5, "d": 32, "n_per_class": 500, "spread": 1.0, "separation": 6.0, "seed": 0}
DESK_ENCODER = {"kind": "mlp", "hidden": 64, "n_blocks": 1, "rep_dim": 16}

PRESETS = {
    "paper": {"batch_size": 160, "lr": 0.1, "tau": 0.5, "alpha1": 0.8, "alpha2": 0.1, "clip_norm": 1.0, "cosine_t_max": 100},
    "desk": {"batch_size": 64, "encoder": DESK_ENCODER, "dataset": DESK_DATASET},
}

AUGMENT_STREAM = 1


@dataclass
class TrainConfig:
    lr: float = 0.1
    cosine_t_max: int = 100
    batch_size: int = 64
    alpha1: float = 0.8
    alpha2: float = 0.1
    tau: float = 0.5
    clip_norm: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 100
    seed: int = 0
    hnpm_enabled: bool = True
    block_student_grad: bool = True
    hnpm_threshold: float = 1.0
    most_similar: bool = False
    student_augment: bool = False
    noise_scale: Optional[float] = None
    checkpoint_every: int = 0
    strict_deterministic: bool = True
    augment: dict = field(default_factory=lambda: AugmentConfig().to_dict())
    encoder: dict = field(default_factory=lambda: dict(DESK_ENCODER))
    dataset: dict = field(default_factory=lambda: dict(DESK_DATASET))

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.lr >= 0 or not math.isfinite(self.lr):
            raise ConfigError(f"lr: must be a finite non-negative number, got {self.lr}")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau: must lie in [0, 1], got {self.tau}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size: mining needs at least 2, got {self.batch_size}")
        if self.cosine_t_max < 1:
            raise ConfigError("cosine_t_max: must be positive")
        if not self.clip_norm > 0:
            raise ConfigError("clip_norm: must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs: must be non-negative")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("adam_beta1/adam_beta2 must lie in [0, 1) and adam_eps must be positive")
        if not self.hnpm_threshold > 0:
            raise ConfigError("hnpm_threshold: must be positive")
        if self.noise_scale is not None and self.noise_scale < 0:
            raise ConfigError("noise_scale: must be non-negative")
        try:
            check_alphas(self.alpha1, self.alpha2)
        except ConfigError as exc:
            raise ConfigError(f"alpha: {exc}") from None
        self.augment_config()

    def augment_config(self) -> AugmentConfig:
        try:
            return AugmentConfig(**self.augment)
        except TypeError as exc:
            raise ConfigError(f"augment: {exc}") from None

    @property
    def threshold(self) -> float:
        return self.hnpm_threshold if self.hnpm_enabled else math.inf

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        kwargs = {}
        for name, value in d.items():
            kwargs[name] = _coerce(name, value, cls)
        return cls(**kwargs)

    def with_overrides(self, **kw) -> "TrainConfig":
        d = self.to_dict()
        for k, v in kw.items():
            if isinstance(v, dict) and isinstance(d.get(k), dict):
                d[k] = {**d[k], **v}
            else:
                d[k] = v
        return TrainConfig.from_dict(d)


_TYPES = {"int": int, "float": float, "bool": bool}


def _coerce(name, value, cls):
    ftype = {f.name: f.type for f in dataclasses.fields(cls)}[name]
    base = ftype.replace("Optional[", "").rstrip("]") if isinstance(ftype, str) else ftype
    if value is None and "Optional" in str(ftype):
        return None
    if base == "dict":
        if not isinstance(value, dict):
            raise ConfigError(f"{name}: expected a mapping, got {type(value).__name__}")
        return dict(value)
    py = _TYPES.get(base)
    if py is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
        return value
    if py is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if py is float:
        if isinstance(value, bool):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{name}: expected a number, got {value!r}") from None
    return value


def load_config(path) -> TrainConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: not valid YAML ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    return TrainConfig.from_dict(raw)


def save_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def apply_preset(cfg: TrainConfig, name: str) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return cfg.with_overrides(**PRESETS[name])


# -- schedule and optimiser ----------------------------------------------------------


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    """Cosine annealing from ``cfg.lr`` to 0 over ``cfg.cosine_t_max`` steps, no restarts."""
    if step >= cfg.cosine_t_max:
        return 0.0
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * step / cfg.cosine_t_max))


@dataclass
class OptimizerState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ParamSet) -> "OptimizerState":
        return cls([np.zeros_like(a) for a in params.arrays()], [np.zeros_like(a) for a in params.arrays()], 0)


def adam_step(params: ParamSet, grads, state: OptimizerState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update applied to every tensor of ``params``."""
    arrays = params.arrays()
    if len(grads) != len(arrays) or any(g.shape != a.shape for g, a in zip(grads, arrays)):
        raise ContractError("gradients are not aligned with parameters")
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for k, (t, g) in enumerate(zip(params.tensors(), grads)):
        state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g
        state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * (g * g)
        mhat = state.m[k] / c1
        vhat = state.v[k] / c2
        t.values = t.values - lr * mhat / (np.sqrt(vhat) + eps)
    return params, state


# -- one step ------------------------------------------------------------------------


@dataclass
class StepResult:
    breakdown: LossBreakdown
    grad_norm: float
    clipped_norm: float


def make_views(raw: np.ndarray, cfg: TrainConfig, rng: RngStream, spread: float = 1.0):
    """Return ``(student_view, teacher_view)`` for one batch of raw samples."""
    if raw.ndim == 4:
        acfg = cfg.augment_config()
        teacher = augment_batch(raw, acfg, rng)
        student = augment_batch(raw, acfg, rng) if cfg.student_augment else normalize_batch(raw, acfg)
        return student, teacher
    scale = cfg.noise_scale if cfg.noise_scale is not None else 0.5 * spread
    teacher = vector_jitter(raw, scale, rng)
    student = vector_jitter(raw, scale, rng) if cfg.student_augment else raw
    return student, teacher


def train_step(
    st: StudentTeacher,
    raw: np.ndarray,
    cfg: TrainConfig,
    opt: OptimizerState,
    rng: RngStream,
    lr: float,
    student_opt: Optional[OptimizerState] = None,
    spread: float = 1.0,
) -> StepResult:
    if len(raw) < 2:
        raise ConfigError("a training batch needs at least 2 samples")
    student_view, teacher_view = make_views(raw, cfg, rng, spread)
    unblocked = not cfg.block_student_grad
    st.student.set_trainable(unblocked)
    st.teacher.zero_grad()
    st.student.zero_grad()
    try:
        from .model import two_view_forward

        u, u_prime = two_view_forward(st, student_view, teacher_view, block_student_grad=cfg.block_student_grad)
        br = total_loss(u, u_prime, cfg.alpha1, cfg.alpha2, cfg.threshold, cfg.most_similar)
    except (DegenerateRepresentationError, DegenerateBatchError) as exc:
        raise type(exc)(f"{exc} (batch of {len(raw)}, lr={lr:.4g}, optimizer step {opt.step})") from None
    ad.backward(br.loss)
    clipped, norm = ad.clip_global_norm(st.teacher.grads(), cfg.clip_norm)
    adam_step(st.teacher, clipped, opt, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    if unblocked:
        s_clipped, _ = ad.clip_global_norm(st.student.grads(), cfg.clip_norm)
        adam_step(st.student, s_clipped, student_opt, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        st.student.zero_grad()
    st.teacher.zero_grad()
    ema_update(st, cfg.tau)
    st.student.set_trainable(False)
    return StepResult(br, norm, ad.global_norm(clipped))


# -- full run ------------------------------------------------------------------------


@dataclass
class MetricsRecord:
    epoch: int
    loss_total: float
    loss_pos: float
    loss_neg: float
    lr: float
    mean_hard_set_size: float
    empty_set_count: int
    seconds: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), separators=(", ", ": "))


@dataclass
class Checkpoint:
    teacher: ParamSet
    student: ParamSet
    opt: OptimizerState
    config: TrainConfig
    epoch: int
    rng_state: dict
    student_opt: Optional[OptimizerState] = None


def resolve_encoder(cfg: TrainConfig, ds: Dataset) -> EncoderSpec:
    enc = dict(cfg.encoder)
    if ds.is_image:
        enc.setdefault("kind", "conv")
        enc["image_shape"] = list(ds.input_shape)
    else:
        enc["input_dim"] = ds.input_shape[0]
    try:
        return EncoderSpec(**enc)
    except TypeError as exc:
        raise ConfigError(f"encoder: {exc}") from None


def init_run(cfg: TrainConfig, ds: Dataset) -> Checkpoint:
    st = StudentTeacher.create(resolve_encoder(cfg, ds), cfg.seed, cfg.tau)
    rng = RngStream(cfg.seed, stream=AUGMENT_STREAM)
    sopt = None if cfg.block_student_grad else OptimizerState.zeros_like(st.student)
    return Checkpoint(st.teacher, st.student, OptimizerState.zeros_like(st.teacher), cfg, 0, rng.get_state(), sopt)


def train(
    cfg: TrainConfig,
    out_dir=None,
    resume: Optional[Checkpoint] = None,
    dataset: Optional[Dataset] = None,
    on_step: Optional[Callable] = None,
    on_epoch: Optional[Callable] = None,
    stop_after: Optional[int] = None,
):
    """Run ``cfg.epochs`` epochs (or up to ``stop_after``) and return ``(checkpoint, metrics)``.

    With ``out_dir`` the per-epoch metrics go to ``metrics.jsonl`` and
    checkpoints to ``checkpoint_XXXX.hnpm`` plus ``final.hnpm``.
    """
    from .checkpoint import save_checkpoint

    ds = dataset if dataset is not None else load_dataset(cfg.dataset)
    if cfg.batch_size > len(ds):
        raise ConfigError(f"batch_size: {cfg.batch_size} exceeds dataset size {len(ds)}")
    ckpt = resume if resume is not None else init_run(cfg, ds)
    spec = resolve_encoder(cfg, ds)
    st = StudentTeacher(spec, ckpt.teacher, ckpt.student, cfg.tau)
    st.teacher.set_trainable(True)
    rng = RngStream(cfg.seed, stream=AUGMENT_STREAM)
    rng.set_state(ckpt.rng_state)
    if not cfg.block_student_grad and ckpt.student_opt is None:
        ckpt.student_opt = OptimizerState.zeros_like(st.student)
    spread = float(ds.provenance.get("spread", 1.0))

    out = Path(out_dir) if out_dir is not None else None
    metrics_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.jsonl"
        if resume is None:
            metrics_path.write_text("")

    records = []
    last = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    for epoch in range(ckpt.epoch, last):
        t0 = time.perf_counter()
        lr = cosine_lr(epoch, cfg)
        sums = np.zeros(4)
        empty = 0
        plan = BatchPlan(cfg.seed, epoch, cfg.batch_size, drop_last=True)
        idx_batches = batches(len(ds), plan, mining=True)
        for step, idx in enumerate(idx_batches):
            res = train_step(st, ds.samples[idx], cfg, ckpt.opt, rng, lr, ckpt.student_opt, spread)
            br = res.breakdown
            sums += (br.total, br.l1, br.l2, br.mean_hard_set_size)
            empty += br.empty_set_count
            if on_step is not None:
                on_step(epoch, step, st, res)
        n = len(idx_batches)
        elapsed = time.perf_counter() - t0
        rec = MetricsRecord(
            epoch=epoch,
            loss_total=sums[0] / n,
            loss_pos=sums[1] / n,
            loss_neg=sums[2] / n,
            lr=lr,
            mean_hard_set_size=sums[3] / n,
            empty_set_count=int(empty),
            seconds=0.0 if cfg.strict_deterministic else elapsed,
        )
        records.append(rec)
        log.info("epoch %d loss %.5f (pos %.5f neg %.5f) lr %.4g", epoch, rec.loss_total, rec.loss_pos, rec.loss_neg, lr)
        ckpt.epoch = epoch + 1
        ckpt.rng_state = rng.get_state()
        if metrics_path is not None:
            with metrics_path.open("a") as fh:
                fh.write(rec.to_json() + "\n")
            if cfg.checkpoint_every and ckpt.epoch % cfg.checkpoint_every == 0:
                save_checkpoint(ckpt, out / f"checkpoint_{ckpt.epoch:04d}.hnpm")
        if on_epoch is not None:
            on_epoch(epoch, st, rec)
    if out is not None:
        save_checkpoint(ckpt, out / "final.hnpm")
    return ckpt, records
