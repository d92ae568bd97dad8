"""Angles between teacher layers as seen from a student hidden state.

For a student vector ``h_s`` and teacher vectors ``h_a``, ``h_b`` the angle is
taken at ``h_s`` between ``u_a = h_a - h_s`` and ``u_b = h_b - h_s``.  A
positive cosine means matching either teacher layer pulls the student in a
broadly similar direction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import PAD_ID, TransformerModel, hidden_stacks
from .tensor import DimensionError

NORM_FLOOR = 1e-12
HIST_BINS = 40
AGGREGATIONS = ("per_token", "mean_pooled")


def pairwise_angle_cosines(student_hidden, teacher_hiddens) -> np.ndarray:
    """``[L_t, L_t]`` cosine matrix for one student vector.

    Entries involving a teacher vector within ``1e-12`` of the student vector
    are NaN (undefined angle); every other diagonal entry is 1.
    """
    s = np.asarray(student_hidden, dtype=float)
    t = np.asarray(teacher_hiddens, dtype=float)
    if t.ndim != 2 or s.ndim != 1 or t.shape[1] != s.shape[0]:
        raise DimensionError(f"student vector {s.shape} vs teacher vectors {t.shape}")
    return batch_angle_cosines(s[None, :], t[:, None, :])[0]


def batch_angle_cosines(student: np.ndarray, teachers: np.ndarray) -> np.ndarray:
    """Cosines for ``N`` samples: student ``[N, D]``, teachers ``[L_t, N, D]`` -> ``[N, L_t, L_t]``."""
    if teachers.ndim != 3 or student.ndim != 2 or teachers.shape[1:] != student.shape:
        raise DimensionError(f"student {student.shape} vs teachers {teachers.shape}")
    u = np.transpose(teachers, (1, 0, 2)) - student[:, None, :]
    norms = np.linalg.norm(u, axis=2)
    valid = norms >= NORM_FLOOR
    unit = u / np.where(valid, norms, 1.0)[:, :, None]
    cos = np.clip(unit @ np.transpose(unit, (0, 2, 1)), -1.0, 1.0)
    ok = valid[:, :, None] & valid[:, None, :]
    return np.where(ok, cos, np.nan)


@dataclass
class AngleReport:
    """Streaming statistics per ``(student_layer, teacher_a, teacher_b)`` with ``a < b``.

    Arrays are indexed ``[s - 1, a - 1, b - 1]``; only the upper triangle is
    used.  ``m2`` is the sum of squared deviations (for Chan-style merging).
    """

    student_layers: int
    teacher_layers: int
    count: np.ndarray
    mean: np.ndarray
    m2: np.ndarray
    excluded: np.ndarray
    hist: np.ndarray
    meta: dict = field(default_factory=dict)

    @classmethod
    def empty(cls, student_layers: int, teacher_layers: int, meta: dict | None = None) -> "AngleReport":
        shape = (student_layers, teacher_layers, teacher_layers)
        return cls(
            student_layers,
            teacher_layers,
            np.zeros(shape, dtype=np.int64),
            np.zeros(shape),
            np.zeros(shape),
            np.zeros(shape, dtype=np.int64),
            np.zeros((student_layers, HIST_BINS), dtype=np.int64),
            dict(meta or {}),
        )

    def add(self, student_layer: int, cosines: np.ndarray) -> None:
        """Fold ``[N, L_t, L_t]`` cosines (NaN = undefined) for one student layer."""
        s = student_layer - 1
        valid = ~np.isnan(cosines)
        n_b = valid.sum(axis=0)
        filled = np.where(valid, cosines, 0.0)
        sums = filled.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            mean_b = np.where(n_b > 0, sums / np.maximum(n_b, 1), 0.0)
        m2_b = (np.where(valid, cosines - mean_b, 0.0) ** 2).sum(axis=0)
        self._combine(s, n_b, mean_b, m2_b)
        self.excluded[s] += (~valid).sum(axis=0)
        iu = np.triu_indices(self.teacher_layers, k=1)
        vals = cosines[:, iu[0], iu[1]].reshape(-1)
        vals = vals[~np.isnan(vals)]
        self.hist[s] += np.histogram(vals, bins=HIST_BINS, range=(-1.0, 1.0))[0]

    def _combine(self, s, n_b, mean_b, m2_b) -> None:
        n_a = self.count[s]
        n = n_a + n_b
        safe = np.maximum(n, 1)
        delta = mean_b - self.mean[s]
        self.mean[s] = np.where(n > 0, self.mean[s] + delta * n_b / safe, 0.0)
        self.m2[s] = self.m2[s] + m2_b + delta**2 * n_a * n_b / safe
        self.count[s] = n

    def merge(self, other: "AngleReport") -> "AngleReport":
        if (self.student_layers, self.teacher_layers) != (other.student_layers, other.teacher_layers):
            raise DimensionError("cannot merge angle reports of different depths")
        out = AngleReport(
            self.student_layers,
            self.teacher_layers,
            self.count.copy(),
            self.mean.copy(),
            self.m2.copy(),
            self.excluded + other.excluded,
            self.hist + other.hist,
            {**self.meta},
        )
        for s in range(self.student_layers):
            out._combine(s, other.count[s], other.mean[s], other.m2[s])
        return out

    # -- views -----------------------------------------------------------------
    def triples(self):
        """Yield ``(s, a, b, mean, std, count, excluded)`` with 1-based layers and ``a < b``."""
        for s in range(self.student_layers):
            for a in range(self.teacher_layers):
                for b in range(a + 1, self.teacher_layers):
                    n = int(self.count[s, a, b])
                    std = math.sqrt(self.m2[s, a, b] / n) if n else float("nan")
                    mean = float(np.clip(self.mean[s, a, b], -1.0, 1.0)) if n else float("nan")
                    yield s + 1, a + 1, b + 1, mean, std, n, int(self.excluded[s, a, b])

    def summary(self) -> dict:
        rows = [r for r in self.triples() if r[5] > 0]
        total = sum(r[5] for r in rows)
        mean = sum(r[3] * r[5] for r in rows) / total if total else float("nan")
        positive = sum(1 for r in rows if r[3] > 0)
        return {
            "mean_cosine": mean,
            "positive_fraction": positive / len(rows) if rows else float("nan"),
            "triples": len(rows),
            "undefined_triples": sum(1 for r in self.triples() if r[5] == 0),
            "samples": int(total),
            "excluded_samples": int(sum(r[6] for r in self.triples())),
        }

    def layer_means(self) -> np.ndarray:
        """Count-weighted mean cosine per student layer."""
        iu = np.triu_indices(self.teacher_layers, k=1)
        out = np.full(self.student_layers, np.nan)
        for s in range(self.student_layers):
            c = self.count[s][iu]
            if c.sum():
                out[s] = float((self.mean[s][iu] * c).sum() / c.sum())
        return out

    # -- text format -------------------------------------------------------------
    def to_text(self) -> str:
        lines = ["# angle-report v1", f"# student_layers={self.student_layers} teacher_layers={self.teacher_layers}"]
        lines += [f"# meta {k}={v}" for k, v in sorted(self.meta.items())]
        lines.append("student\tteacher_a\tteacher_b\tcount\texcluded\tmean\tstd\tm2")
        for s, a, b, mean, std, n, exc in self.triples():
            m2 = float(self.m2[s - 1, a - 1, b - 1])
            lines.append(f"{s}\t{a}\t{b}\t{n}\t{exc}\t{float(self.mean[s - 1, a - 1, b - 1])!r}\t{std!r}\t{m2!r}")
        lines.append("# histogram student_layer counts... (bins over [-1, 1])")
        for s in range(self.student_layers):
            lines.append(f"hist\t{s + 1}\t" + " ".join(str(int(c)) for c in self.hist[s]))
        lines.append("# summary")
        lines += [f"{k}={v!r}" for k, v in self.summary().items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "AngleReport":
        lines = text.splitlines()
        if not lines or lines[0] != "# angle-report v1":
            raise ValueError("not an angle report")
        dims = dict(kv.split("=") for kv in lines[1][2:].split())
        rep = cls.empty(int(dims["student_layers"]), int(dims["teacher_layers"]))
        for line in lines[2:]:
            if line.startswith("# meta "):
                k, v = line[len("# meta ") :].split("=", 1)
                rep.meta[k] = v
            elif line.startswith("hist\t"):
                _, s, counts = line.split("\t")
                rep.hist[int(s) - 1] = [int(c) for c in counts.split()]
            elif line and line[0].isdigit():
                s, a, b, n, exc, mean, _std, m2 = line.split("\t")
                idx = (int(s) - 1, int(a) - 1, int(b) - 1)
                rep.count[idx] = int(n)
                rep.excluded[idx] = int(exc)
                rep.mean[idx] = float(mean)
                rep.m2[idx] = float(m2)
        return rep

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_text())
        return path

    @classmethod
    def read(cls, path) -> "AngleReport":
        return cls.from_text(Path(path).read_text())

    def write_histograms(self, directory) -> list[Path]:
        """One plain-text file per student layer: ``bin_lo bin_hi count``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        edges = np.linspace(-1.0, 1.0, HIST_BINS + 1)
        paths = []
        for s in range(self.student_layers):
            p = directory / f"angle_hist_student{s + 1}.txt"
            rows = ["# bin_lo\tbin_hi\tcount"]
            rows += [f"{edges[i]:.3f}\t{edges[i + 1]:.3f}\t{int(self.hist[s, i])}" for i in range(HIST_BINS)]
            p.write_text("\n".join(rows) + "\n")
            paths.append(p)
        return paths


def _vectors(states, tokens: np.ndarray, aggregation: str) -> np.ndarray:
    """Flatten ``[B, T, D]`` hidden states to per-sample vectors."""
    mask = tokens != PAD_ID
    if aggregation == "per_token":
        return states[mask]
    w = mask / mask.sum(axis=1, keepdims=True)
    return (states * w[:, :, None]).sum(axis=1)


def build_angle_report(
    student: TransformerModel,
    teacher: TransformerModel,
    tokens: np.ndarray,
    aggregation: str = "per_token",
    *,
    stack: str = "encoder",
    decoder_inputs: np.ndarray | None = None,
    projections=None,
    mapping=None,
    batch_size: int = 128,
    meta: dict | None = None,
) -> AngleReport:
    """Angle statistics of ``student`` against every teacher-layer pair on ``tokens``.

    With ``projections`` and ``mapping`` given, a mapped student layer is
    carried through its projection before the angle is taken; unmapped
    layers (and the default) use raw hidden states.
    """
    if aggregation not in AGGREGATIONS:
        raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
    if student.spec.hidden_dim != teacher.spec.hidden_dim and projections is None:
        raise DimensionError(f"hidden dims differ ({student.spec.hidden_dim} vs {teacher.spec.hidden_dim}); pass projections")
    tokens = np.asarray(tokens)
    if len(tokens) == 0:
        raise ValueError("angle report needs a nonempty sample")
    proj_for = {}
    if projections is not None and mapping is not None:
        proj_for = {s: i for i, (s, _) in enumerate(mapping.pairs)}
    info = {"aggregation": aggregation, "stack": stack, "projected": bool(proj_for), **(meta or {})}
    report = AngleReport.empty(student.spec.num_layers, teacher.spec.num_layers, info)
    for i in range(0, len(tokens), batch_size):
        xb = tokens[i : i + batch_size]
        dec = None if decoder_inputs is None else decoder_inputs[i : i + batch_size]
        _, s_h = student(xb, dec) if dec is not None else student(xb)
        _, t_h = teacher(xb, dec) if dec is not None else teacher(xb)
        s_states, t_states = hidden_stacks(s_h)[stack], hidden_stacks(t_h)[stack]
        mask_src = xb if stack == "encoder" else dec
        t_vecs = np.stack([_vectors(h.data, mask_src, aggregation) for h in t_states])
        for s_idx, h in enumerate(s_states, start=1):
            if s_idx in proj_for:
                h = projections.apply(proj_for[s_idx], h)
            s_vec = _vectors(h.data, mask_src, aggregation)
            report.add(s_idx, batch_angle_cosines(s_vec, t_vecs))
    return report
