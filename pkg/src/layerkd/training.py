"""Optimisers, batching and evaluation shared by teacher training and distillation."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .models import PAD_ID, TransformerModel, greedy_decode
from .tasks import Dataset, decoder_inputs
from .tensor import Tensor


class SGD:
    """SGD with heavy-ball momentum: ``v = m*v + g; p -= lr*v``."""

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.9):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.momentum = momentum
        self._vel = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for p, v in zip(self.params, self._vel):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= lr * v

    def zero_grad(self) -> None:
        T.zero_grads(self.params)


class Adam:
    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        T.zero_grads(self.params)


def make_optimizer(name: str, params, lr: float, momentum: float = 0.9):
    if name == "sgd":
        return SGD(params, lr, momentum)
    if name == "adam":
        return Adam(params, lr)
    raise ValueError(f"unknown optimizer {name!r}")


def clip_grad_norm(params: list[Tensor], max_norm: float | None) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if max_norm is not None and norm > max_norm:
        for g in grads:
            g *= max_norm / norm
    return norm


def lr_at(step: int, base: float, total: int, warmup: int) -> float:
    """Linear warm-up, then linear decay to 10% of ``base`` at ``total``."""
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    frac = (step - warmup) / max(1, total - warmup)
    return base * (1.0 - 0.9 * min(1.0, frac))


def batch_order(n: int, batch_size: int, steps: int, rng: np.random.Generator):
    """Yield ``steps`` index arrays, reshuffling once per pass over the data."""
    perm = rng.permutation(n)
    pos = 0
    for _ in range(steps):
        if pos + batch_size > n:
            perm = rng.permutation(n)
            pos = 0
        yield perm[pos : pos + batch_size]
        pos += batch_size


# ---------------------------------------------------------------------------
# evaluation


def predict_classes(model: TransformerModel, x: np.ndarray, chunk: int = 256) -> np.ndarray:
    preds = []
    for i in range(0, len(x), chunk):
        logits, _ = model(x[i : i + chunk])
        preds.append(logits.data.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(model: TransformerModel, ds: Dataset, split: str, full: bool = True) -> dict[str, float]:
    """Task metrics on one split.

    Classification: ``accuracy``.  Seq2seq: teacher-forced ``token_accuracy``
    and, when ``full``, greedy-decoding ``exact_match``.
    """
    x, y = ds.arrays(split)
    if len(x) == 0:
        return {}
    if ds.kind == "classification":
        return {"accuracy": float((predict_classes(model, x) == y).mean())}
    correct = total = 0
    for i in range(0, len(x), 256):
        xb, yb = x[i : i + 256], y[i : i + 256]
        logits, _ = model(xb, decoder_inputs(yb))
        mask = yb != PAD_ID
        correct += int(((logits.data.argmax(axis=-1) == yb) & mask).sum())
        total += int(mask.sum())
    out = {"token_accuracy": correct / total}
    if full:
        hits = 0
        for i in range(0, len(x), 256):
            xb, yb = x[i : i + 256], y[i : i + 256]
            gen = greedy_decode(model, xb, yb.shape[1])
            hits += int(np.all((gen == yb) | (yb == PAD_ID), axis=1).sum())
        out["exact_match"] = hits / len(x)
    return out


def primary_metric(kind: str) -> str:
    return "accuracy" if kind == "classification" else "token_accuracy"


def task_loss(model: TransformerModel, ds_kind: str, xb: np.ndarray, yb: np.ndarray):
    """Supervised cross-entropy for one batch; returns ``(loss, logits, hiddens)``."""
    if ds_kind == "classification":
        logits, hiddens = model(xb)
        return T.cross_entropy(logits, yb), logits, hiddens
    logits, hiddens = model(xb, decoder_inputs(yb))
    b, t, v = logits.shape
    flat_y = yb.reshape(-1)
    loss = T.cross_entropy(T.reshape(logits, (b * t, v)), flat_y, (flat_y != PAD_ID).astype(float))
    return loss, logits, hiddens


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    warmup: int = 100
    grad_clip: float | None = 1.0
    eval_every: int = 250
    target_metric: float | None = None
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def train_supervised(model: TransformerModel, ds: Dataset, cfg: TrainConfig, log=None) -> dict:
    """Train ``model`` on the task labels with dev-based model selection.

    Stops early once the dev metric reaches ``cfg.target_metric``.  Returns a
    summary with the best dev metric and the step it was reached.
    """
    x, y = ds.arrays("train")
    metric = primary_metric(ds.kind)
    opt = make_optimizer(cfg.optimizer, model.parameters(), cfg.lr, cfg.momentum)
    rng = np.random.default_rng([cfg.seed, 11])
    best = (-1.0, 0, model.state_dict())
    t0 = time.perf_counter()
    step = 0
    for step, idx in enumerate(batch_order(len(x), cfg.batch_size, cfg.steps, rng), start=1):
        tape = T.Tape()
        with tape:
            loss, _, _ = task_loss(model, ds.kind, x[idx], y[idx])
        opt.zero_grad()
        tape.backward(loss)
        clip_grad_norm(opt.params, cfg.grad_clip)
        opt.step(lr_at(step - 1, cfg.lr, cfg.steps, cfg.warmup))
        if log is not None:
            log({"step": step, "loss": loss.item(), "wall_time": time.perf_counter() - t0})
        if step % cfg.eval_every == 0 or step == cfg.steps:
            dev = evaluate(model, ds, "dev", full=False)[metric]
            if dev > best[0]:
                best = (dev, step, model.state_dict())
            if cfg.target_metric is not None and dev >= cfg.target_metric:
                break
    model.load_state_dict(best[2])
    return {"best_dev": best[0], "best_step": best[1], "steps_run": step, "metric": metric}
