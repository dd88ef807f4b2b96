"""KLD objective, Adam, and the online epoch loop with best-checkpoint selection."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .model import Model
from .tensor import Tensor, _make, backward, spatial_softmax
from .weights import atomic_write_bytes, load_weights

log = logging.getLogger(__name__)

DEFAULT_EPS = 1e-7


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-6
    epochs: int = 10
    epsilon_kld: float = DEFAULT_EPS
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_metric: str = "validation_kld"
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ValueError(f"epochs must be an integer >= 1, got {self.epochs}")
        if self.checkpoint_metric != "validation_kld":
            raise ValueError(f"unsupported checkpoint metric {self.checkpoint_metric!r}")


def normalize_output(raw: Tensor) -> Tensor:
    """Map raw scores to a per-image distribution (spatial softmax, max-shifted)."""
    return spatial_softmax(raw)


def kld_loss(p: Tensor, q, eps: float = DEFAULT_EPS) -> Tensor:
    """sum_i Q_i ln(eps + Q_i / (eps + P_i)), averaged over the batch; differentiable in P."""
    qd = q.data if isinstance(q, Tensor) else np.asarray(q, dtype=p.dtype)
    qd = qd.reshape(p.shape).astype(p.dtype, copy=False)
    if qd.shape != p.shape:
        raise ValueError(f"kld_loss: shapes {p.shape} and {qd.shape} differ")
    batch = p.shape[0] if p.data.ndim == 4 else 1
    # terms with Q_i = 0 contribute nothing (0 ln 0 = 0), which matters only when eps = 0
    on = qd > 0
    denom = eps + p.data
    ratio = np.divide(qd, denom, out=np.zeros_like(qd), where=on)
    inner = np.where(on, eps + ratio, 1.0)
    value = np.sum(qd * np.log(inner)) / batch

    def backward_fn(g):
        return (g * np.where(on, -qd * ratio / (inner * np.where(on, denom, 1.0)), 0.0) / batch,)

    return _make(np.asarray(value, dtype=p.dtype), (p,), "kld_loss", backward_fn, eps=eps)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              config: TrainConfig) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params``."""
    b1, b2 = config.adam_beta1, config.adam_beta2
    state.t += 1
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = b1 * (m if m is not None else 0) + (1 - b1) * g
        v = b2 * (v if v is not None else 0) + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        step = config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
        p.data = (p.data - step).astype(p.dtype)
    return state


def predict_distribution(model: Model, image: np.ndarray) -> np.ndarray:
    raw = model.forward(Tensor(np.asarray(image, dtype=model.config.dtype)[None]))
    return normalize_output(raw).data[0, 0]


def sample_loss(model: Model, sample, eps: float) -> Tensor:
    raw = model.forward(Tensor(np.asarray(sample.image, dtype=model.config.dtype)[None]))
    return kld_loss(normalize_output(raw), sample.density[None, None], eps)


def evaluate_kld(model: Model, samples, eps: float = DEFAULT_EPS) -> float:
    with no_grad(model):
        return float(np.mean([sample_loss(model, s, eps).item() for s in samples]))


class no_grad:
    """Temporarily switch off gradient recording for a model's parameters."""

    def __init__(self, model: Model):
        self.model = model

    def __enter__(self):
        for p in self.model.params.values():
            p.requires_grad = False

    def __exit__(self, *exc):
        for p in self.model.params.values():
            p.requires_grad = True


@dataclass
class EpochLog:
    epoch: int
    mean_train_kld: float
    val_kld: float
    wall_seconds: float


@dataclass
class TrainResult:
    best_epoch: int
    best_val_kld: float
    best_state: dict[str, np.ndarray]
    log: list[EpochLog]
    steps: int

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "mean_train_kld", "val_kld", "wall_seconds"])
        for e in self.log:
            w.writerow([e.epoch, repr(e.mean_train_kld), repr(e.val_kld), f"{e.wall_seconds:.3f}"])
        return buf.getvalue()

    def write_log(self, path) -> None:
        atomic_write_bytes(path, self.log_csv().encode("utf-8"))


def train(model: Model, train_set, val_set, config: TrainConfig, callback=None) -> TrainResult:
    """Online (batch size one) Adam training; keeps the epoch with the lowest validation KLD.

    On return ``model`` holds the best checkpoint's weights.
    """
    if not train_set or not val_set:
        raise ValueError("train: training and validation sets must be non-empty")
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    history: list[EpochLog] = []
    best: tuple[float, int, dict] | None = None
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        losses = []
        for idx in rng.permutation(len(train_set)):
            sample = train_set[idx]
            model.zero_grad()
            loss = sample_loss(model, sample, config.epsilon_kld)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(
                    f"non-finite loss {value} at epoch {epoch} on sample "
                    f"{sample.name or idx!r} (index {idx})"
                )
            backward(loss)
            grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
            adam_step(model.params, grads, state, config)
            losses.append(value)
        val = evaluate_kld(model, val_set, config.epsilon_kld)
        entry = EpochLog(epoch, float(np.mean(losses)), val, time.perf_counter() - start)
        history.append(entry)
        log.info("epoch %d train_kld=%.6f val_kld=%.6f", epoch, entry.mean_train_kld, val)
        if callback is not None:
            callback(entry)
        if best is None or val < best[0]:
            best = (val, epoch, model.state_dict())
    model.load_state_dict(best[2])
    return TrainResult(best[1], best[0], best[2], history, state.t)


def finetune(model: Model, base_weights_path, train_set, val_set, config: TrainConfig,
             encoder_only: bool = False) -> TrainResult:
    """Load a base checkpoint, then train with unchanged optimisation settings."""
    load_weights(model, base_weights_path, encoder_only=encoder_only)
    return train(model, train_set, val_set, config)
