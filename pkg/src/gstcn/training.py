"""Negative log-likelihood training with SGD or Adam and a step learning-rate schedule."""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import BiGaussianField, FieldTensors, GSTCN, make_batch

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))


class NonFiniteLossError(FloatingPointError):
    def __init__(self, index: tuple[int, ...]):
        super().__init__(f"non-finite loss at (t, n) = {index[-2:]}" if len(index) >= 2 else "non-finite loss")
        self.index = index


class TrainingDiverged(RuntimeError):
    """Raised when a batch loss is not finite; carries the last good state."""

    def __init__(self, epoch: int, params: dict[str, np.ndarray], report: "TrainReport"):
        super().__init__(f"training diverged in epoch {epoch}")
        self.epoch = epoch
        self.params = params
        self.report = report


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 250
    lr0: float = 0.1
    lr_decay: float = 0.1
    decay_every: int = 80
    seed: int = 0
    grad_clip: float | None = None
    precision: str = "float32"
    # divide the summed NLL of a batch by its number of vehicle-steps
    normalize_loss: bool = True
    # "sgd" is plain gradient descent; "adam" rescales steps per parameter
    optimizer: str = "sgd"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    # weight each step's NLL by (sigma_x sigma_y)^beta held constant; 0 is the plain NLL
    nll_beta: float = 0.0
    # leading epochs that fit only the means by squared error before the NLL takes over
    mean_warmup_epochs: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.decay_every < 1:
            raise ValueError("batch_size, epochs and decay_every must be positive")
        if self.lr0 < 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("invalid learning-rate schedule")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        self.adam_betas = tuple(self.adam_betas)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    train_nll: float
    val_nll: float
    lr: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1

    def to_csv(self, timing: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_nll", "val_nll", "lr", "seconds"][: 5 if timing else 4])
        for r in self.epochs:
            row = [r.epoch, repr(r.train_nll), repr(r.val_nll), repr(r.lr)]
            if timing:
                row.append(f"{r.seconds:.3f}")
            w.writerow(row)
        return buf.getvalue()


def _field_tensors(field_, dtype) -> FieldTensors:
    if isinstance(field_, FieldTensors):
        return field_
    arrs = [np.asarray(a, dtype=dtype) for a in (field_.mu_x, field_.mu_y, field_.sigma_x, field_.sigma_y, field_.rho)]
    mx, my, sx, sy, rho = (Tensor(a) for a in arrs)
    return FieldTensors(mx, my, sx, sy, rho, ad.log(sx), ad.log(sy))


def nll_terms(field_: FieldTensors | BiGaussianField, truth: np.ndarray) -> Tensor:
    """Elementwise -log N(truth | mu, sigma, rho); ``truth`` is (..., 2, F, N)."""
    f = _field_tensors(field_, np.asarray(truth).dtype if np.asarray(truth).dtype.kind == "f" else np.float64)
    truth = np.asarray(truth)
    tx, ty = truth[..., 0, :, :], truth[..., 1, :, :]
    if tx.shape != f.mu_x.shape:
        raise ValueError(f"nll_loss: truth {truth.shape} does not match field {f.mu_x.shape}")
    zx = (Tensor(tx.astype(f.mu_x.dtype)) - f.mu_x) / f.sigma_x
    zy = (Tensor(ty.astype(f.mu_y.dtype)) - f.mu_y) / f.sigma_y
    one_m = 1.0 - f.rho * f.rho
    q = zx * zx - 2.0 * f.rho * zx * zy + zy * zy
    return LOG_2PI + f.log_sigma_x + f.log_sigma_y + 0.5 * ad.log(one_m) + q / (2.0 * one_m)


def nll_loss(field_: FieldTensors | BiGaussianField, truth: np.ndarray, mask: np.ndarray | None = None,
             normalize: bool = False, beta: float = 0.0) -> Tensor:
    """Summed bivariate-normal negative log-likelihood.

    ``mask`` (..., N) excludes padded vehicles.  With ``normalize`` the sum is
    divided by the number of counted vehicle-steps.  ``beta`` > 0 scales each
    term by the constant (sigma_x sigma_y)^beta, which keeps wide predicted
    spreads from shrinking the gradient of the means.
    """
    f = _field_tensors(field_, np.asarray(truth).dtype if np.asarray(truth).dtype.kind == "f" else np.float64)
    terms = nll_terms(f, truth)
    count = float(np.prod(terms.shape))
    weight = None
    if mask is not None:
        weight = np.broadcast_to(np.asarray(mask, dtype=terms.dtype)[..., None, :], terms.shape)
        count = float(weight.sum())
    if not np.all(np.isfinite(terms.data)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(terms.data))[0])
        raise NonFiniteLossError(bad)
    if beta:
        w = (f.sigma_x.data * f.sigma_y.data) ** beta
        weight = w if weight is None else weight * w
    if weight is not None:
        terms = terms * weight.astype(terms.dtype, copy=False)
    loss = ad.sum(terms)
    if normalize:
        loss = loss * (1.0 / max(count, 1.0))
    return loss


def mean_squared_loss(field_: FieldTensors, truth: np.ndarray, mask: np.ndarray | None = None,
                      normalize: bool = False) -> Tensor:
    """0.5 * squared displacement of the means, the NLL at unit sigmas up to a constant."""
    truth = np.asarray(truth)
    dx = field_.mu_x - Tensor(truth[..., 0, :, :].astype(field_.mu_x.dtype))
    dy = field_.mu_y - Tensor(truth[..., 1, :, :].astype(field_.mu_y.dtype))
    sq = dx * dx + dy * dy
    count = float(np.prod(sq.shape))
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=sq.dtype)[..., None, :], sq.shape)
        sq = sq * m
        count = float(m.sum())
    loss = ad.sum(sq) * 0.5
    if normalize:
        loss = loss * (1.0 / max(count, 1.0))
    return loss


def sgd_step(params: dict[str, Tensor], lr: float, grads: dict[str, np.ndarray] | None = None,
             clip: float | None = None) -> dict[str, Tensor]:
    """In-place p <- p - lr * g; gradients default to each tensor's ``.grad``."""
    g = {k: (grads[k] if grads is not None else p.grad) for k, p in params.items()}
    scale = _clip_scale(g, clip)
    for k, p in params.items():
        if g[k] is not None:
            p.data -= (lr * scale) * g[k].astype(p.data.dtype, copy=False)
    return params


def _clip_scale(g: dict[str, np.ndarray | None], clip: float | None) -> float:
    if clip is None:
        return 1.0
    norm = float(np.sqrt(sum(float(np.sum(np.square(v, dtype=np.float64))) for v in g.values() if v is not None)))
    return clip / norm if norm > clip else 1.0


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], lr: float, state: AdamState, betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8, clip: float | None = None) -> dict[str, Tensor]:
    """In-place bias-corrected Adam update from each tensor's ``.grad``."""
    g = {k: p.grad for k, p in params.items()}
    scale = _clip_scale(g, clip)
    b1, b2 = betas
    state.step += 1
    c1, c2 = 1.0 - b1**state.step, 1.0 - b2**state.step
    for k, p in params.items():
        if g[k] is None:
            continue
        grad = g[k].astype(p.data.dtype, copy=False) * p.data.dtype.type(scale)
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * grad * grad
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype, copy=False)
    return params


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    return config.lr0 * config.lr_decay ** (epoch // config.decay_every)


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def evaluate_nll(model: GSTCN, segments: Sequence, batch_size: int = 128) -> float:
    """Mean NLL per vehicle-step in evaluation mode."""
    total, count = 0.0, 0.0
    with ad.no_grad():
        for i in range(0, len(segments), batch_size):
            batch = make_batch(segments[i:i + batch_size], model.config, model.dtype)
            out = model.forward_batch(batch, training=False)
            total += float(nll_loss(out, batch.truth, batch.mask).data)
            count += float(batch.mask.sum()) * model.config.future_len
    return total / count if count else float("nan")


def fit(model: GSTCN, split, config: TrainConfig, progress: bool = False) -> tuple[dict[str, np.ndarray], TrainReport]:
    """Train ``model`` in place; returns the best-validation parameters and the report.

    Shuffling and dropout draw from generators seeded by ``config.seed``, so
    a repeated call with the same inputs reproduces every number.
    """
    train = list(split.train)
    if not train:
        raise ValueError("empty training split")
    val = list(split.val)
    rng = np.random.default_rng(config.seed)
    dropout_rng = np.random.default_rng([config.seed, 1])
    report = TrainReport()
    best = (np.inf, _snapshot(model.params))
    cached = {}
    adam = AdamState()
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = lr_schedule(epoch, config)
        order = rng.permutation(len(train))
        total, steps = 0.0, 0.0
        for s in range(0, len(train), config.batch_size):
            idx = tuple(order[s:s + config.batch_size])
            batch = cached.get(idx)
            if batch is None:
                batch = make_batch([train[i] for i in idx], model.config, model.dtype)
                if len(train) <= config.batch_size:
                    cached[idx] = batch
            for p in model.params.values():
                p.grad = None
            out = model.forward_batch(batch, training=True, rng=dropout_rng)
            try:
                plain = epoch >= config.mean_warmup_epochs and not config.nll_beta
                if epoch < config.mean_warmup_epochs:
                    loss = mean_squared_loss(out, batch.truth, batch.mask, normalize=config.normalize_loss)
                else:
                    loss = nll_loss(out, batch.truth, batch.mask, normalize=config.normalize_loss,
                                    beta=config.nll_beta)
                value = float(loss.data)
                if not plain:
                    with ad.no_grad():
                        value = float(nll_loss(out, batch.truth, batch.mask, normalize=config.normalize_loss).data)
            except NonFiniteLossError:
                raise TrainingDiverged(epoch, best[1], report) from None
            loss.backward()
            grads_ok = all(p.grad is None or np.all(np.isfinite(p.grad)) for p in model.params.values())
            if not grads_ok:
                raise TrainingDiverged(epoch, best[1], report)
            if config.optimizer == "adam":
                adam_step(model.params, lr, adam, config.adam_betas, config.adam_eps, config.grad_clip)
            else:
                sgd_step(model.params, lr, clip=config.grad_clip)
            n_steps = float(batch.mask.sum()) * model.config.future_len
            total += value * (n_steps if config.normalize_loss else 1.0)
            steps += n_steps
        train_nll = total / steps
        try:
            val_nll = evaluate_nll(model, val) if val else train_nll
        except NonFiniteLossError:
            val_nll = float("nan")
        if not np.isfinite(val_nll):
            raise TrainingDiverged(epoch, best[1], report)
        report.epochs.append(EpochRecord(epoch, train_nll, val_nll, lr, time.perf_counter() - t0))
        if val_nll < best[0]:
            best = (val_nll, _snapshot(model.params))
            report.best_epoch = epoch
        if progress:
            log.info("epoch %d lr %.4g train %.4f val %.4f", epoch, lr, train_nll, val_nll)
    return best[1], report


def load_params(model: GSTCN, values: dict[str, np.ndarray]) -> None:
    for k, v in values.items():
        model.params[k].data = np.array(v, dtype=model.dtype, copy=True)
