"""Synthetic classification / transduction tasks and the token-file format.

Token file format (UTF-8, one example per line)::

    <input tokens, space separated> TAB <class id | target tokens, space separated>

A dataset directory holds ``train.tsv``, ``dev.tsv``, ``test.tsv`` and
optionally ``vocab.txt`` (one token per line, line number = id).  Without a
vocab file, the vocabulary is built from ``train.tsv`` and tokens seen only
in dev/test map to the reserved unknown id.
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import BOS_ID, PAD_ID, UNK_ID

SPECIALS = ("<pad>", "<unk>", "<bos>")
SPLITS = ("train", "dev", "test")
KINDS = ("classification", "seq2seq")


class TaskConfigError(ValueError):
    pass


class TokenFileError(ValueError):
    pass


@dataclass
class Dataset:
    kind: str
    vocab: dict[str, int]
    inputs: list[tuple[int, ...]]
    targets: list  # int class ids, or tuples of token ids
    splits: list[str]
    seed: int | None = None
    name: str = "dataset"
    unknown_counts: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def max_len(self) -> int:
        lens = [len(x) for x in self.inputs]
        if self.kind == "seq2seq":
            lens += [len(y) for y in self.targets]
        return max(lens, default=0)

    @property
    def num_classes(self) -> int:
        return (max(self.targets) + 1) if self.kind == "classification" and self.targets else 0

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == split]

    def arrays(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        """Padded ``[N, T]`` inputs and targets (``[N]`` or ``[N, T_out]``)."""
        idx = self.indices(split)
        x = _pad([self.inputs[i] for i in idx])
        if self.kind == "classification":
            y = np.array([self.targets[i] for i in idx], dtype=np.int64)
        else:
            y = _pad([self.targets[i] for i in idx])
        return x, y

    def id_to_token(self) -> list[str]:
        inv = [""] * len(self.vocab)
        for tok, i in self.vocab.items():
            inv[i] = tok
        return inv


def _pad(rows: list[tuple[int, ...]]) -> np.ndarray:
    width = max((len(r) for r in rows), default=0)
    out = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def split_of(tokens, seed: int | None = None) -> str:
    """Hash-based split: equal token sequences always land in the same split."""
    h = hashlib.sha256(np.asarray(tokens, dtype=np.int64).tobytes()).digest()
    bucket = int.from_bytes(h[:8], "little") % 10
    return "train" if bucket < 8 else ("dev" if bucket == 8 else "test")


def _base_vocab(num_symbols: int) -> dict[str, int]:
    vocab = {s: i for i, s in enumerate(SPECIALS)}
    for j in range(num_symbols):
        vocab[f"t{j}"] = len(vocab)
    return vocab


def _check(size: int, seq_len: int, vocab_size: int) -> None:
    if vocab_size < 4:
        raise TaskConfigError(f"need at least 4 content symbols, got {vocab_size}")
    if size < 10:
        raise TaskConfigError(f"size must be >= 10, got {size}")
    if seq_len < 4:
        raise TaskConfigError(f"seq_len must be >= 4, got {seq_len}")


# ---------------------------------------------------------------------------
# classification: label = (low-half symbols are the majority) XOR (trigram present)


@dataclass(frozen=True)
class ClassificationRule:
    num_symbols: int
    trigram: tuple[int, int, int]

    @property
    def low(self) -> range:
        first = len(SPECIALS)
        return range(first, first + self.num_symbols // 2)

    def majority_low(self, seq) -> bool:
        lo = sum(1 for t in seq if t in self.low)
        return lo > len(seq) - lo

    def has_trigram(self, seq) -> bool:
        a, b, c = self.trigram
        return any(seq[i] == a and seq[i + 1] == b and seq[i + 2] == c for i in range(len(seq) - 2))

    def label(self, seq) -> int:
        return int(self.majority_low(seq) != self.has_trigram(seq))


def classification_rule(seed: int, vocab_size: int) -> ClassificationRule:
    rng = np.random.default_rng([seed, 1])
    tri = tuple(int(t) + len(SPECIALS) for t in rng.choice(vocab_size, size=3, replace=False))
    return ClassificationRule(vocab_size, tri)


def gen_classification_task(seed: int, size: int, seq_len: int, vocab_size: int) -> Dataset:
    """Binary task whose label is majority-class XOR trigram presence.

    ``vocab_size`` counts content symbols; three reserved ids precede them.
    Target bits are drawn uniformly and sequences are rejection-sampled to
    match them, so both classes are balanced up to sampling noise.
    """
    _check(size, seq_len, vocab_size)
    rule = classification_rule(seed, vocab_size)
    rng = np.random.default_rng([seed, 2])
    first = len(SPECIALS)
    inputs, targets = [], []
    while len(inputs) < size:
        want_major, want_tri = bool(rng.integers(2)), bool(rng.integers(2))
        for _ in range(1000):
            seq = rng.integers(first, first + vocab_size, size=seq_len)
            if want_tri:
                pos = int(rng.integers(seq_len - 2))
                seq[pos : pos + 3] = rule.trigram
            seq = tuple(int(t) for t in seq)
            if rule.has_trigram(seq) == want_tri and rule.majority_low(seq) == want_major:
                break
        else:
            raise TaskConfigError("could not sample a sequence for the requested label bits")
        inputs.append(seq)
        targets.append(int(want_major != want_tri))
    splits = [split_of(x) for x in inputs]
    return Dataset("classification", _base_vocab(vocab_size), inputs, targets, splits, seed, f"cls-s{seed}")


# ---------------------------------------------------------------------------
# seq2seq: target = involutive substitution applied to the reversed input


def involution(seed: int, vocab_size: int) -> dict[int, int]:
    """Random pairing of content ids (a fixed point remains when the count is odd)."""
    rng = np.random.default_rng([seed, 3])
    ids = [int(i) + len(SPECIALS) for i in rng.permutation(vocab_size)]
    perm = {i: i for i in ids}
    for a, b in zip(ids[0::2], ids[1::2]):
        perm[a], perm[b] = b, a
    return perm


def transduce(seq, perm: dict[int, int]) -> tuple[int, ...]:
    return tuple(perm[t] for t in reversed(seq))


def gen_seq2seq_task(seed: int, size: int, seq_len: int, vocab_size: int) -> Dataset:
    _check(size, seq_len, vocab_size)
    perm = involution(seed, vocab_size)
    rng = np.random.default_rng([seed, 4])
    first = len(SPECIALS)
    inputs = [tuple(int(t) for t in rng.integers(first, first + vocab_size, size=seq_len)) for _ in range(size)]
    targets = [transduce(x, perm) for x in inputs]
    splits = [split_of(x) for x in inputs]
    return Dataset("seq2seq", _base_vocab(vocab_size), inputs, targets, splits, seed, f"s2s-s{seed}")


def decoder_inputs(targets: np.ndarray) -> np.ndarray:
    """Teacher-forcing inputs: BOS followed by the target shifted right."""
    out = np.full_like(targets, PAD_ID)
    out[:, 0] = BOS_ID
    out[:, 1:] = targets[:, :-1]
    return out


# ---------------------------------------------------------------------------
# token files


@dataclass(frozen=True)
class TokenFormat:
    kind: str = "classification"
    files: tuple[tuple[str, str], ...] = (("train", "train.tsv"), ("dev", "dev.tsv"), ("test", "test.tsv"))
    vocab_file: str = "vocab.txt"


def write_token_files(ds: Dataset, directory, fmt: TokenFormat | None = None) -> Path:
    fmt = fmt or TokenFormat(kind=ds.kind)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    inv = ds.id_to_token()
    for split, fname in fmt.files:
        lines = []
        for i in ds.indices(split):
            src = " ".join(inv[t] for t in ds.inputs[i])
            tgt = str(ds.targets[i]) if ds.kind == "classification" else " ".join(inv[t] for t in ds.targets[i])
            lines.append(f"{src}\t{tgt}\n")
        (directory / fname).write_text("".join(lines), encoding="utf-8")
    (directory / fmt.vocab_file).write_text("".join(f"{t}\n" for t in inv), encoding="utf-8")
    return directory


def _parse_lines(path: Path, kind: str):
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
            raise TokenFileError(f"{path}:{lineno}: expected '<input tokens>\\t<target>'")
        src = parts[0].split()
        if kind == "classification":
            try:
                tgt = int(parts[1])
            except ValueError:
                raise TokenFileError(f"{path}:{lineno}: class id {parts[1]!r} is not an integer") from None
            if tgt < 0:
                raise TokenFileError(f"{path}:{lineno}: negative class id")
        else:
            tgt = parts[1].split()
        rows.append((src, tgt))
    return rows


def load_token_file(path, fmt: TokenFormat | None = None) -> Dataset:
    """Read a dataset directory (or a single file, whose lines become ``train``)."""
    fmt = fmt or TokenFormat()
    if fmt.kind not in KINDS:
        raise TaskConfigError(f"unknown task kind {fmt.kind!r}")
    path = Path(path)
    if not path.exists():
        raise TokenFileError(f"{path}: no such file or directory")
    if path.is_dir():
        parts = [(split, path / fname) for split, fname in fmt.files if (path / fname).exists()]
        vocab_path = path / fmt.vocab_file
    else:
        parts = [("train", path)]
        vocab_path = None
    if not parts:
        raise TokenFileError(f"no token files found under {path}")
    parsed = [(split, _parse_lines(p, fmt.kind)) for split, p in parts]
    if sum(len(rows) for _, rows in parsed) == 0:
        raise TokenFileError(f"{path}: dataset is empty")

    if vocab_path is not None and vocab_path.exists():
        tokens = vocab_path.read_text(encoding="utf-8").splitlines()
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise TokenFileError(f"{vocab_path}: must start with {SPECIALS}")
        vocab = {t: i for i, t in enumerate(tokens)}
    else:
        vocab = {s: i for i, s in enumerate(SPECIALS)}
        for split, rows in parsed:
            if split != "train":
                continue
            for src, tgt in rows:
                for t in src + (tgt if fmt.kind == "seq2seq" else []):
                    vocab.setdefault(t, len(vocab))

    unknown: Counter = Counter()

    def ids(toks, split):
        out = []
        for t in toks:
            i = vocab.get(t)
            if i is None:
                unknown[split] += 1
                i = UNK_ID
            out.append(i)
        return tuple(out)

    inputs, targets, splits = [], [], []
    for split, rows in parsed:
        for src, tgt in rows:
            inputs.append(ids(src, split))
            targets.append(tgt if fmt.kind == "classification" else ids(tgt, split))
            splits.append(split)
    return Dataset(fmt.kind, vocab, inputs, targets, splits, None, path.name, dict(unknown))
