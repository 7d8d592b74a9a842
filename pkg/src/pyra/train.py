"""Parameter-efficient training: AdamW over the trainable tensors only.

Adapters and head share ``lr_peft``; generators use ``lr_generators``. The
learning rate warms up linearly and then follows a cosine decay to zero.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import numerics as nx
from .data import Split, SyntheticTask
from .numerics import Rng, Tensor
from .schedule import MergeSchedule
from .vit import ModelState, component_of, forward

PIPELINES = ("one_stage", "two_stage")


class TrainingDivergedError(RuntimeError):
    """Raised on a non-finite loss or gradient; carries the last good trainable state."""

    def __init__(self, message: str, last_good: dict[str, np.ndarray] | None = None, history=None):
        super().__init__(message)
        self.last_good = last_good or {}
        self.history = history or []


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    warmup_epochs: int = 10
    batch_size: int = 32
    lr_peft: float = 1e-3
    lr_generators: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    pipeline: str = "one_stage"
    steps_per_epoch: int | None = None  # default: one pass over the train split
    stage1_fraction: float = 0.5  # two_stage: share of epochs trained without merging
    stage2_adapters: bool = True  # two_stage: keep training adapters with the generators
    eval_batch_size: int = 64
    restore_best: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("epochs and batch sizes must be positive")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError(f"warmup_epochs must lie in [0, epochs], got {self.warmup_epochs}")
        if self.lr_peft < 0 or self.lr_generators < 0 or self.weight_decay < 0:
            raise ValueError("learning rates and weight decay must be non-negative")
        if self.pipeline not in PIPELINES:
            raise ValueError(f"pipeline must be one of {PIPELINES}")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be positive")
        if not 0 < self.stage1_fraction < 1:
            raise ValueError("stage1_fraction must lie in (0, 1)")


# --------------------------------------------------------------------------- optimizer


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def init_optim_state(params: dict[str, Tensor]) -> OptimState:
    st = OptimState()
    for name, p in params.items():
        if not p.requires_grad:
            raise ValueError(f"{name} is frozen and gets no optimizer state")
        st.m[name] = np.zeros_like(p.data)
        st.v[name] = np.zeros_like(p.data)
    return st


def group_lr(name: str, config: TrainConfig, scale: float = 1.0) -> float:
    peak = config.lr_generators if component_of(name) == "generators" else config.lr_peft
    return peak * scale


def optimizer_step(params: dict[str, Tensor], state: OptimState, config: TrainConfig, lr_scale: float = 1.0) -> None:
    """One AdamW update with bias-corrected moments and decoupled decay ``w -= lr * wd * w``.

    ``lr_scale`` multiplies each group's peak rate (the warmup/cosine factor).
    Tensors are updated independently, so enumeration order does not matter.
    """
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingDivergedError(f"non-finite gradient in {name}")
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        lr = group_lr(name, config, lr_scale)
        update = (m / c1) / (np.sqrt(v / c2) + config.eps)
        p.data = p.data - lr * config.weight_decay * p.data - lr * update


def lr_schedule(epoch: float, config: TrainConfig, peak: float = 1.0) -> float:
    """Linear warmup 0 -> peak over ``warmup_epochs``, then cosine to 0 at ``epochs``.

    ``epoch`` may be fractional (step / steps_per_epoch).
    """
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    w, E = config.warmup_epochs, config.epochs
    if epoch < w:
        return peak * epoch / w
    if E == w:
        return peak
    progress = min((epoch - w) / (E - w), 1.0)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


# --------------------------------------------------------------------------- evaluation


def _logits(model, images) -> np.ndarray:
    if isinstance(model, ModelState):
        return forward(images, model).data
    out = model(images)
    return out.data if isinstance(out, Tensor) else np.asarray(out)


def evaluate(model, split: Split, batch_size: int = 64) -> tuple[float, float]:
    """Top-1 accuracy and mean cross-entropy. ``model`` is a ModelState or ``images -> logits``."""
    if len(split) == 0:
        raise ValueError("cannot evaluate an empty split")
    correct, loss_sum = 0, 0.0
    for images, labels in split.batches(batch_size):
        logits = _logits(model, images)
        correct += int(np.sum(np.argmax(logits, axis=-1) == labels))
        z = logits - logits.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        loss_sum += float(-logp[np.arange(labels.size), labels].sum())
    return correct / len(split), loss_sum / len(split)


def loss_on(state: ModelState, images, labels) -> Tensor:
    return nx.cross_entropy(forward(images, state), labels)


# --------------------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    history: list[dict]
    initial_loss: float
    best_val_acc: float
    best_epoch: int
    best_params: dict[str, np.ndarray]

    def metrics_jsonl(self) -> str:
        return "".join(json.dumps(rec) + "\n" for rec in self.history)


def snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def restore(params: dict[str, Tensor], values: dict[str, np.ndarray]) -> None:
    for k, v in values.items():
        params[k].data = v.copy()


def _stages(state: ModelState, config: TrainConfig):
    """(model view, trainable subset, epoch count) per stage."""
    trainable = state.trainable_parameters()
    if config.pipeline == "one_stage":
        return [(state, trainable, config.epochs)]
    e1 = max(1, min(config.epochs - 1, round(config.epochs * config.stage1_fraction)))
    plain = replace(state, schedule=MergeSchedule.identity(state.arch.L), generators=None)
    s1 = {k: p for k, p in trainable.items() if component_of(k) != "generators"}
    s2 = {
        k: p
        for k, p in trainable.items()
        if component_of(k) in ("generators", "head") or (config.stage2_adapters and component_of(k) == "adapters")
    }
    return [(plain, s1, e1), (state, s2, config.epochs - e1)]


def train(state: ModelState, task: SyntheticTask, config: TrainConfig, log=None) -> TrainResult:
    """Train ``state`` in place and return the per-epoch history.

    Each history record holds epoch, lr, train_loss (mean over the epoch's
    batches) and val_acc. With ``restore_best`` the trainables end at the
    best-validation snapshot.
    """
    train_split, val_split = task.split("train"), task.split("val")
    all_trainable = state.trainable_parameters()
    steps = config.steps_per_epoch or math.ceil(len(train_split) / config.batch_size)
    shuffle_rng = Rng(config.seed, 101)

    initial_loss = float(loss_on(state, train_split.images[: config.batch_size], train_split.labels[: config.batch_size]).item())
    history: list[dict] = []
    best_acc, best_epoch, best = -1.0, -1, snapshot(all_trainable)
    good = snapshot(all_trainable)
    epoch_global = 0
    for model, params, n_epochs in _stages(state, config):
        opt = init_optim_state(params)
        for e in range(n_epochs):
            losses, lr_now = [], 0.0
            order = np.empty(0, dtype=np.int64)
            for s in range(steps):
                pos = (s * config.batch_size) % len(train_split)
                if pos == 0 or order.size == 0:
                    order = shuffle_rng.permutation(len(train_split))
                sel = order[pos : pos + config.batch_size]
                lr_now = lr_schedule(e + s / steps, replace(config, epochs=n_epochs, warmup_epochs=min(config.warmup_epochs, n_epochs)))
                nx.zero_grads(all_trainable.values())
                loss = loss_on(model, train_split.images[sel], train_split.labels[sel])
                value = float(loss.item())
                if not math.isfinite(value):
                    raise TrainingDivergedError(
                        f"loss became {value} at epoch {epoch_global}, step {s}", last_good=good, history=history
                    )
                nx.backward(loss)
                try:
                    optimizer_step(params, opt, config, lr_now)
                except TrainingDivergedError as err:
                    raise TrainingDivergedError(str(err), last_good=good, history=history) from None
                losses.append(value)
            val_acc, _ = evaluate(state, val_split, config.eval_batch_size)
            rec = {"epoch": epoch_global, "lr": lr_now, "train_loss": float(np.mean(losses)), "val_acc": val_acc}
            history.append(rec)
            if log is not None:
                log(rec)
            good = snapshot(all_trainable)
            if val_acc > best_acc:
                best_acc, best_epoch, best = val_acc, epoch_global, snapshot(all_trainable)
            epoch_global += 1
    if config.restore_best:
        restore(all_trainable, best)
    return TrainResult(history, initial_loss, best_acc, best_epoch, best)


# --------------------------------------------------------------------------- gradient check


@dataclass
class GradCheckEntry:
    name: str
    rel_error: float
    worst_index: tuple[int, ...]
    autodiff: float
    numeric: float
    checked: int


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tol: float

    @property
    def max_rel_error(self) -> float:
        return max((e.rel_error for e in self.entries), default=0.0)

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tol

    def failures(self) -> list[str]:
        return [
            f"{e.name}: rel error {e.rel_error:.3e} (worst coordinate {e.worst_index}: "
            f"autodiff {e.autodiff:.6e} vs numeric {e.numeric:.6e})"
            for e in self.entries
            if e.rel_error >= self.tol
        ]

    def to_dict(self) -> dict:
        return {"tol": self.tol, "ok": self.ok, "max_rel_error": self.max_rel_error, "entries": [asdict(e) for e in self.entries]}


def grad_check_trainables(
    state: ModelState,
    images,
    labels,
    names=None,
    eps: float = 1e-6,
    tol: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autodiff gradients with central differences for every trainable tensor.

    The relative error of a tensor is ``|g_ad - g_fd| / max(|g_ad|, |g_fd|)``
    over the checked coordinates (all of them unless ``max_coords`` is set).
    Run in float64.
    """
    params = state.trainable_parameters()
    if names is not None:
        params = {k: params[k] for k in names}
    nx.zero_grads(params.values())
    nx.backward(loss_on(state, images, labels))
    pick = Rng(seed, 202)
    entries = []
    for name, p in params.items():
        ad = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(pick.permutation(flat.size)[:max_coords])
        fd = np.zeros(coords.size)
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + eps
            up = loss_on(state, images, labels).item()
            flat[c] = orig - eps
            down = loss_on(state, images, labels).item()
            flat[c] = orig
            fd[j] = (up - down) / (2 * eps)
        ad_sel = ad.reshape(-1)[coords]
        denom = max(np.linalg.norm(ad_sel), np.linalg.norm(fd))
        rel = float(np.linalg.norm(ad_sel - fd) / denom) if denom > 0 else 0.0
        w = int(np.argmax(np.abs(ad_sel - fd)))
        entries.append(
            GradCheckEntry(
                name=name,
                rel_error=rel,
                worst_index=tuple(int(i) for i in np.unravel_index(coords[w], p.shape)),
                autodiff=float(ad_sel[w]),
                numeric=float(fd[w]),
                checked=int(coords.size),
            )
        )
    nx.zero_grads(params.values())
    return GradCheckReport(entries, tol)
