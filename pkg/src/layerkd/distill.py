"""Prediction matching, hidden-state matching and the layer-selection strategies."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .models import PAD_ID, TransformerModel, build_model, evenly_spaced, hidden_stacks, init_student_from_teacher
from .tasks import Dataset, decoder_inputs
from .tensor import NonFiniteError, Tensor
from .training import SGD, batch_order, clip_grad_norm, evaluate, lr_at, primary_metric

STRATEGIES = ("none", "forward", "reverse", "all_to_one", "random")
MATCHING_STRATEGIES = STRATEGIES[1:]
INIT_SCHEMES = ("random", "weight_copy")


class ConfigError(ValueError):
    pass


class MappingError(ValueError):
    pass


class DistillError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# layer mappings


@dataclass(frozen=True)
class LayerMapping:
    """Pairs ``(student_layer, teacher_layer)``, both 1-based."""

    pairs: tuple[tuple[int, int], ...]
    strategy_name: str
    random_seed: int | None = None

    def validate(self, student_layers: int, teacher_layers: int) -> "LayerMapping":
        s_idx = [s for s, _ in self.pairs]
        if s_idx != sorted(set(s_idx)):
            raise MappingError(f"student indices must be distinct and ascending: {s_idx}")
        for s, t in self.pairs:
            if not (1 <= s <= student_layers and 1 <= t <= teacher_layers):
                raise MappingError(f"pair ({s}, {t}) out of range for L_s={student_layers}, L_t={teacher_layers}")
        if self.strategy_name == "none" and self.pairs:
            raise MappingError("strategy 'none' must have no pairs")
        return self

    @property
    def teacher_layers(self) -> list[int]:
        return [t for _, t in self.pairs]

    def to_dict(self) -> dict:
        return {"strategy": self.strategy_name, "random_seed": self.random_seed, "pairs": [list(p) for p in self.pairs]}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerMapping":
        return cls(tuple((int(s), int(t)) for s, t in d["pairs"]), d["strategy"], d.get("random_seed"))


def select_layers(strategy_name: str, student_layers: int, teacher_layers: int, seed: int | None = None) -> LayerMapping:
    if strategy_name not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy_name!r}; choose from {STRATEGIES}")
    if not 1 <= student_layers <= teacher_layers:
        raise ConfigError(f"unsupported depths: need 1 <= L_s <= L_t, got L_s={student_layers}, L_t={teacher_layers}")
    students = range(1, student_layers + 1)
    forward = evenly_spaced(student_layers, teacher_layers)
    if strategy_name == "none":
        teachers: list[int] = []
    elif strategy_name == "forward":
        teachers = forward
    elif strategy_name == "reverse":
        teachers = forward[::-1]
    elif strategy_name == "all_to_one":
        teachers = [-(-teacher_layers // 2)] * student_layers
    else:
        if seed is None:
            raise ConfigError("random strategy needs an explicit seed")
        order = np.random.default_rng([seed, 7]).permutation(student_layers)
        teachers = [forward[j] for j in order]
    pairs = tuple(zip(students, teachers)) if teachers else ()
    mapping = LayerMapping(pairs, strategy_name, seed if strategy_name == "random" else None)
    return mapping.validate(student_layers, teacher_layers)


# ---------------------------------------------------------------------------
# projections


@dataclass
class ProjectionSet:
    """One ``[teacher_dim, student_dim]`` map per mapping pair; ``None`` is a frozen identity."""

    matrices: list[Tensor | None]
    student_dim: int
    teacher_dim: int

    @property
    def identity(self) -> bool:
        return self.student_dim == self.teacher_dim

    def parameters(self) -> list[Tensor]:
        return [m for m in self.matrices if m is not None]

    def apply(self, i: int, h: Tensor) -> Tensor:
        a = self.matrices[i]
        if a is None:
            return h
        lead = h.shape[:-1]
        flat = T.reshape(h, (-1, h.shape[-1]))
        return T.reshape(T.matmul(flat, T.transpose(a, (1, 0))), (*lead, self.teacher_dim))


def build_projections(mapping: LayerMapping, student_dim: int, teacher_dim: int, seed: int = 0) -> ProjectionSet:
    if student_dim == teacher_dim:
        return ProjectionSet([None] * len(mapping.pairs), student_dim, teacher_dim)
    rng = np.random.default_rng([seed, 5])
    bound = np.sqrt(3.0 / student_dim)
    mats = [Tensor(rng.uniform(-bound, bound, (teacher_dim, student_dim)), requires_grad=True) for _ in mapping.pairs]
    return ProjectionSet(mats, student_dim, teacher_dim)


# ---------------------------------------------------------------------------
# losses


def kl_loss(teacher_logits, student_logits: Tensor, temperature: float = 1.0, weights: np.ndarray | None = None) -> Tensor:
    """Mean over examples (or token positions) of ``KL(p_teacher || q_student)``.

    Both distributions are ``softmax(logits / temperature)`` over the last
    axis.  The teacher side is treated as a constant.
    """
    t_data = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, dtype=float)
    if t_data.shape != student_logits.shape:
        raise T.DimensionError(f"kl_loss: teacher {t_data.shape} vs student {student_logits.shape}")
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    c = t_data.shape[-1]
    t_flat = t_data.reshape(-1, c) / temperature
    log_p = t_flat - t_flat.max(axis=1, keepdims=True)
    log_p = log_p - np.log(np.exp(log_p).sum(axis=1, keepdims=True))
    p = np.exp(log_p)
    n = t_flat.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    w = w / w.sum()
    neg_entropy = float((w * (p * log_p).sum(axis=1)).sum())
    log_q = T.log_softmax(T.scale(T.reshape(student_logits, (n, c)), 1.0 / temperature), axis=-1)
    cross = T.sum_all(T.mul_const(log_q, p * w[:, None]))
    return T.add_const(T.scale(cross, -1.0), np.asarray(neg_entropy))


def hidden_match_loss(student_hiddens, teacher_hiddens, mapping: LayerMapping, projections: ProjectionSet) -> Tensor:
    """``sum_i mse(A_i h_s[s_i], h_t[t_i])`` over the mapping (0 when empty)."""
    if not mapping.pairs:
        return Tensor(0.0)
    if len(projections.matrices) != len(mapping.pairs):
        raise MappingError("projection count does not match the mapping")
    total = None
    for i, (s, t) in enumerate(mapping.pairs):
        if not (1 <= s <= len(student_hiddens) and 1 <= t <= len(teacher_hiddens)):
            raise MappingError(f"pair ({s}, {t}) references a layer that was not provided")
        target = teacher_hiddens[t - 1]
        target = Tensor._wrap(target.data if isinstance(target, Tensor) else np.asarray(target, dtype=float))
        term = T.mse(projections.apply(i, student_hiddens[s - 1]), target)
        total = term if total is None else T.add(total, term)
    return total


def total_distill_loss(kl: Tensor, hid: Tensor, lambda_: float) -> Tensor:
    if lambda_ < 0:
        raise ConfigError(f"lambda must be non-negative, got {lambda_}")
    return T.add(kl, T.scale(hid, lambda_))


# ---------------------------------------------------------------------------
# configuration


@dataclass
class DistillConfig:
    lambda_: float = 1.0
    strategy: str = "forward"
    init_scheme: str = "random"
    distance_metric: str = "mse"
    temperature: float = 1.0
    lr: float = 0.05
    momentum: float = 0.9
    steps: int = 1000
    batch_size: int = 32
    warmup: int = 50
    grad_clip: float | None = 1.0
    eval_every: int = 100
    seed: int = 0
    mapping_seed: int | None = None
    transfer_size: int | None = None

    def validate(self) -> "DistillConfig":
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.init_scheme not in INIT_SCHEMES:
            raise ConfigError(f"unknown init scheme {self.init_scheme!r}")
        if self.distance_metric != "mse":
            raise ConfigError("only the 'mse' distance is supported")
        if self.lambda_ < 0:
            raise ConfigError("lambda must be non-negative")
        if self.temperature <= 0 or self.lr <= 0 or self.steps < 1 or self.batch_size < 1:
            raise ConfigError("temperature, lr, steps and batch_size must be positive")
        if self.transfer_size is not None and self.transfer_size < 1:
            raise ConfigError("transfer_size must be positive when given")
        return self

    @property
    def effective_lambda(self) -> float:
        return 0.0 if self.strategy == "none" else self.lambda_

    @property
    def effective_mapping_seed(self) -> int | None:
        if self.strategy != "random":
            return None
        return self.seed if self.mapping_seed is None else self.mapping_seed

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lambda_")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        d = dict(d)
        if "lambda" in d:
            d["lambda_"] = d.pop("lambda")
        return cls(**d).validate()


def make_student(teacher: TransformerModel, depth: int, init_scheme: str, seed: int) -> TransformerModel:
    """A ``depth``-layer copy of the teacher's architecture, initialised per ``init_scheme``."""
    student = build_model(teacher.spec.with_layers(depth), seed)
    if init_scheme == "weight_copy":
        init_student_from_teacher(student, teacher)
    elif init_scheme != "random":
        raise ConfigError(f"unknown init scheme {init_scheme!r}")
    return student


# ---------------------------------------------------------------------------
# the distillation loop


@dataclass
class DistillResult:
    student: TransformerModel
    mapping: LayerMapping
    projections: dict[str, ProjectionSet]
    log: list[dict] = field(default_factory=list)
    best_dev: float = float("nan")
    best_step: int = 0
    metric: str = "accuracy"


def _teacher_targets(teacher: TransformerModel, ds: Dataset, x: np.ndarray, y: np.ndarray, layers: set[int], chunk: int = 256):
    """Teacher logits and the needed hidden layers for every training example."""
    logits, hid = [], {s: {l: [] for l in layers} for s in ("encoder", "decoder")}
    for i in range(0, len(x), chunk):
        xb = x[i : i + chunk]
        if ds.kind == "classification":
            lg, hs = teacher(xb)
        else:
            lg, hs = teacher(xb, decoder_inputs(y[i : i + chunk]))
        logits.append(lg.data)
        for stack, states in hidden_stacks(hs).items():
            for l in layers:
                hid[stack][l].append(states[l - 1].data)
    cached = {stack: {l: np.concatenate(v) for l, v in d.items() if v} for stack, d in hid.items()}
    return np.concatenate(logits), {k: v for k, v in cached.items() if v}


def distill(teacher: TransformerModel, student: TransformerModel, config: DistillConfig, ds: Dataset, log=None) -> DistillResult:
    """Train ``student`` against the frozen ``teacher``.

    Minimises ``KL + lambda * hidden`` with momentum SGD on a fixed
    warm-up/decay schedule, selecting the checkpoint with the best dev score.
    Encoder-decoder models apply the mapping to each stack independently.
    """
    config.validate()
    before = teacher.fingerprint()
    was_trainable = [p.requires_grad for p in teacher.parameters()]
    teacher.set_trainable(False)
    try:
        mapping = select_layers(config.strategy, student.spec.num_layers, teacher.spec.num_layers, config.effective_mapping_seed)
        stacks = ("encoder",) if student.spec.kind == "encoder_classifier" else ("encoder", "decoder")
        projections = {
            s: build_projections(mapping, student.spec.hidden_dim, teacher.spec.hidden_dim, config.seed + k)
            for k, s in enumerate(stacks)
        }
        x, y = ds.arrays("train")
        if config.transfer_size is not None:
            x, y = x[: config.transfer_size], y[: config.transfer_size]
        if len(x) == 0:
            raise DistillError("no training examples to distil on")
        t_logits, t_hidden = _teacher_targets(teacher, ds, x, y, set(mapping.teacher_layers))
        params = student.parameters() + [p for ps in projections.values() for p in ps.parameters()]
        opt = SGD(params, config.lr, config.momentum)
        metric = primary_metric(ds.kind)
        rng = np.random.default_rng([config.seed, 13])
        lam = config.effective_lambda
        records: list[dict] = []
        best = (-1.0, 0, student.state_dict())
        t0 = time.perf_counter()
        for step, idx in enumerate(batch_order(len(x), config.batch_size, config.steps, rng), start=1):
            xb = x[idx]
            tape = T.Tape()
            try:
                with tape:
                    if ds.kind == "classification":
                        s_logits, s_hid = student(xb)
                        weights = None
                    else:
                        s_logits, s_hid = student(xb, decoder_inputs(y[idx]))
                        weights = (y[idx] != PAD_ID).astype(float)
                    kl = kl_loss(t_logits[idx], s_logits, config.temperature, weights)
                    s_stacks = hidden_stacks(s_hid)
                    hid = None
                    for stack in stacks:
                        t_states = {l: t_hidden[stack][l][idx] for l in mapping.teacher_layers}
                        teacher_list = [t_states.get(l) for l in range(1, teacher.spec.num_layers + 1)]
                        term = hidden_match_loss(s_stacks[stack], teacher_list, mapping, projections[stack])
                        hid = term if hid is None else T.add(hid, term)
                    loss = total_distill_loss(kl, hid, lam)
            except NonFiniteError as exc:
                raise DistillError(f"non-finite value at step {step}: {exc}") from exc
            opt.zero_grad()
            tape.backward(loss)
            clip_grad_norm(opt.params, config.grad_clip)
            opt.step(lr_at(step - 1, config.lr, config.steps, config.warmup))
            if not all(np.all(np.isfinite(p.data)) for p in opt.params):
                raise DistillError(f"non-finite parameters after step {step}")
            rec = {"step": step, "kl": kl.item(), "hid": hid.item(), "total": loss.item(), "wall_time": time.perf_counter() - t0}
            records.append(rec)
            if log is not None:
                log(rec)
            if step % config.eval_every == 0 or step == config.steps:
                dev = evaluate(student, ds, "dev", full=False)[metric]
                if dev > best[0]:
                    best = (dev, step, student.state_dict())
        student.load_state_dict(best[2])
    finally:
        for p, flag in zip(teacher.parameters(), was_trainable):
            p.requires_grad = flag
    if teacher.fingerprint() != before:
        raise DistillError("teacher parameters changed during distillation")
    return DistillResult(student, mapping, projections, records, best[0], best[1], metric)
