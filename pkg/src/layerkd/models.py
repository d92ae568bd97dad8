"""Miniature post-LN transformers that expose the hidden state after every block."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

PAD_ID = 0
UNK_ID = 1
BOS_ID = 2

KINDS = ("encoder_classifier", "encoder_decoder")


class SpecError(ValueError):
    pass


class InitializationError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "encoder_classifier"
    num_layers: int = 3
    hidden_dim: int = 32
    num_heads: int = 4
    ffn_dim: int = 64
    vocab_size: int = 16
    max_seq_len: int = 16
    num_classes: int = 2

    def validate(self) -> "ModelSpec":
        if self.kind not in KINDS:
            raise SpecError(f"unknown model kind {self.kind!r}")
        for f in fields(self):
            if f.name == "kind":
                continue
            v = getattr(self, f.name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise SpecError(f"{f.name} must be a positive integer, got {v!r}")
        if self.hidden_dim % self.num_heads:
            raise SpecError(f"hidden_dim={self.hidden_dim} is not divisible by num_heads={self.num_heads}")
        if self.kind == "encoder_decoder" and self.vocab_size <= BOS_ID:
            raise SpecError("encoder_decoder needs a vocabulary that includes the reserved ids")
        return self

    def with_layers(self, num_layers: int) -> "ModelSpec":
        return ModelSpec(**{**asdict(self), "num_layers": num_layers})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d).validate()


def stacks_for(kind: str) -> tuple[str, ...]:
    return ("encoder",) if kind == "encoder_classifier" else ("encoder", "decoder")


def _block_param_shapes(spec: ModelSpec, stack: str) -> list[tuple[str, tuple[int, ...]]]:
    d, f = spec.hidden_dim, spec.ffn_dim
    attn = [(f"{w}.weight", (d, d)) for w in "qkvo"] + [(f"{w}.bias", (d,)) for w in "qkvo"]
    out: list[tuple[str, tuple[int, ...]]] = []
    out += [(f"attn.{n}", s) for n, s in attn]
    out += [("ln1.gain", (d,)), ("ln1.bias", (d,))]
    if stack == "decoder":
        out += [(f"cross.{n}", s) for n, s in attn]
        out += [("ln_cross.gain", (d,)), ("ln_cross.bias", (d,))]
    out += [("ffn.in.weight", (d, f)), ("ffn.in.bias", (f,)), ("ffn.out.weight", (f, d)), ("ffn.out.bias", (d,))]
    out += [("ln2.gain", (d,)), ("ln2.bias", (d,))]
    return out


def param_shapes(spec: ModelSpec) -> list[tuple[str, tuple[int, ...]]]:
    """Every parameter name and shape, in the fixed order used for seeding."""
    d = spec.hidden_dim
    out = [
        ("embed.tokens", (spec.vocab_size, d)),
        ("embed.positions", (spec.max_seq_len, d)),
        ("embed.ln.gain", (d,)),
        ("embed.ln.bias", (d,)),
    ]
    for stack in stacks_for(spec.kind):
        for i in range(spec.num_layers):
            out += [(f"{stack}.{i}.{n}", s) for n, s in _block_param_shapes(spec, stack)]
    if spec.kind == "encoder_classifier":
        out += [("head.weight", (d, spec.num_classes)), ("head.bias", (spec.num_classes,))]
    return out


def _init_value(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    if name.endswith(".gain"):
        return np.ones(shape)
    if name.endswith(".bias"):
        return np.zeros(shape)
    if name.startswith("embed."):
        bound = 0.5
    else:
        bound = np.sqrt(3.0 / shape[0])  # unit output variance for unit-variance inputs
    return rng.uniform(-bound, bound, size=shape)


class TransformerModel:
    """A realised parameter set for ``spec``.

    ``forward`` returns ``(logits, hiddens)``.  For the classifier ``hiddens``
    is the list of block outputs ``h_1..h_L``; for the encoder-decoder it is a
    dict ``{"encoder": [...], "decoder": [...]}``.  Use :func:`hidden_stacks`
    to treat both uniformly.
    """

    def __init__(self, spec: ModelSpec, params: dict[str, Tensor], seed: int | None = None):
        self.spec = spec
        self.params = params
        self.seed = seed

    # -- parameter management -------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def block_params(self, stack: str, index: int) -> dict[str, Tensor]:
        """Parameters of 0-based block ``index`` in ``stack``, keyed by local name."""
        prefix = f"{stack}.{index}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise InitializationError("state dict keys do not match model parameters")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise InitializationError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=T.DTYPE, copy=True)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(self.params[k].data.tobytes())
        return h.hexdigest()

    # -- forward --------------------------------------------------------------
    def forward(self, tokens, decoder_inputs=None):
        return forward(self, tokens, decoder_inputs)

    __call__ = forward


def build_model(spec: ModelSpec, seed: int) -> TransformerModel:
    spec.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(spec):
        params[name] = Tensor(_init_value(name, shape, rng), requires_grad=True, name=name)
    return TransformerModel(spec, params, seed)


def hidden_stacks(hiddens) -> dict[str, list[Tensor]]:
    if isinstance(hiddens, dict):
        return hiddens
    return {"encoder": list(hiddens)}


# ---------------------------------------------------------------------------
# forward pass


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    lead = x.shape[:-1]
    flat = T.reshape(x, (-1, x.shape[-1]))
    y = T.add_bias(T.matmul(flat, w), b)
    return T.reshape(y, (*lead, w.shape[1]))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return T.transpose(T.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def _attention(p: dict[str, Tensor], prefix: str, x: Tensor, mem: Tensor, heads: int, mask: np.ndarray) -> Tensor:
    """Multi-head attention of queries from ``x`` over keys/values from ``mem``.

    ``mask`` is an additive constant broadcastable to ``[B, H, Tq, Tk]``.
    """
    b, tq, d = x.shape
    q = _split_heads(_linear(x, p[f"{prefix}.q.weight"], p[f"{prefix}.q.bias"]), heads)
    k = _split_heads(_linear(mem, p[f"{prefix}.k.weight"], p[f"{prefix}.k.bias"]), heads)
    v = _split_heads(_linear(mem, p[f"{prefix}.v.weight"], p[f"{prefix}.v.bias"]), heads)
    scores = T.scale(T.bmm(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(d // heads))
    weights = T.softmax(T.add_const(scores, mask), axis=-1)
    ctx = T.reshape(T.transpose(T.bmm(weights, v), (0, 2, 1, 3)), (b, tq, d))
    return _linear(ctx, p[f"{prefix}.o.weight"], p[f"{prefix}.o.bias"])


def _block(p: dict[str, Tensor], x: Tensor, heads: int, self_mask, mem=None, mem_mask=None) -> Tensor:
    x = T.layer_norm(T.add(x, _attention(p, "attn", x, x, heads, self_mask)), p["ln1.gain"], p["ln1.bias"])
    if mem is not None:
        x = T.layer_norm(T.add(x, _attention(p, "cross", x, mem, heads, mem_mask)), p["ln_cross.gain"], p["ln_cross.bias"])
    h = T.gelu(_linear(x, p["ffn.in.weight"], p["ffn.in.bias"]))
    x = T.layer_norm(T.add(x, _linear(h, p["ffn.out.weight"], p["ffn.out.bias"])), p["ln2.gain"], p["ln2.bias"])
    return x


_NEG = -1e9


def _key_mask(tokens: np.ndarray) -> np.ndarray:
    return np.where(tokens == PAD_ID, _NEG, 0.0)[:, None, None, :]


def _embed(model: TransformerModel, tokens: np.ndarray) -> Tensor:
    p = model.params
    spec = model.spec
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"token batch must be 2-D [batch, seq], got shape {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= spec.vocab_size):
        raise ValueError(f"token id out of range [0, {spec.vocab_size})")
    if tokens.shape[1] > spec.max_seq_len:
        raise ValueError(f"sequence length {tokens.shape[1]} exceeds max_seq_len={spec.max_seq_len}")
    b, t = tokens.shape
    pos = np.broadcast_to(np.arange(t), (b, t))
    x = T.add(T.embedding(p["embed.tokens"], tokens), T.embedding(p["embed.positions"], pos))
    return T.layer_norm(x, p["embed.ln.gain"], p["embed.ln.bias"])


def encode(model: TransformerModel, tokens: np.ndarray) -> list[Tensor]:
    tokens = np.asarray(tokens)
    x = _embed(model, tokens)
    mask = _key_mask(tokens)
    hiddens = []
    for i in range(model.spec.num_layers):
        x = _block(model.block_params("encoder", i), x, model.spec.num_heads, mask)
        hiddens.append(x)
    return hiddens


def decode(model: TransformerModel, memory: Tensor, src_tokens: np.ndarray, dec_inputs: np.ndarray) -> list[Tensor]:
    dec_inputs = np.asarray(dec_inputs)
    t = dec_inputs.shape[1]
    causal = np.triu(np.full((t, t), _NEG), k=1)[None, None]
    self_mask = causal + _key_mask(dec_inputs)
    mem_mask = _key_mask(np.asarray(src_tokens))
    x = _embed(model, dec_inputs)
    hiddens = []
    for i in range(model.spec.num_layers):
        x = _block(model.block_params("decoder", i), x, model.spec.num_heads, self_mask, memory, mem_mask)
        hiddens.append(x)
    return hiddens


def forward(model: TransformerModel, tokens, decoder_inputs=None):
    """Run the model.

    Classifier: logits ``[B, num_classes]`` from the mean-pooled (non-pad)
    final hidden state.  Encoder-decoder: teacher-forced ``decoder_inputs``
    give logits ``[B, T_dec, vocab]`` through the tied token embedding.
    """
    tokens = np.asarray(tokens)
    spec = model.spec
    enc = encode(model, tokens)
    if spec.kind == "encoder_classifier":
        pooled = T.masked_mean(enc[-1], tokens != PAD_ID)
        logits = T.add_bias(T.matmul(pooled, model.params["head.weight"]), model.params["head.bias"])
        return logits, enc
    if decoder_inputs is None:
        raise ValueError("encoder_decoder forward needs decoder_inputs")
    dec = decode(model, enc[-1], tokens, decoder_inputs)
    b, t, d = dec[-1].shape
    flat = T.reshape(dec[-1], (b * t, d))
    emb_t = T.transpose(model.params["embed.tokens"], (1, 0))
    logits = T.reshape(T.matmul(flat, emb_t), (b, t, spec.vocab_size))
    return logits, {"encoder": enc, "decoder": dec}


def greedy_decode(model: TransformerModel, tokens: np.ndarray, length: int) -> np.ndarray:
    """Greedy generation of ``length`` tokens (no tape is used)."""
    tokens = np.asarray(tokens)
    memory = encode(model, tokens)[-1]
    out = np.full((tokens.shape[0], 1), BOS_ID, dtype=np.int64)
    for _ in range(length):
        dec = decode(model, memory, tokens, out)[-1]
        last = dec.data[:, -1, :]
        logits = last @ model.params["embed.tokens"].data.T
        logits[:, :BOS_ID + 1] = -np.inf  # never emit reserved ids
        out = np.concatenate([out, logits.argmax(axis=1)[:, None]], axis=1)
    return out[:, 1:]


# ---------------------------------------------------------------------------
# weight copying


def evenly_spaced(student_layers: int, teacher_layers: int) -> list[int]:
    """1-based teacher layers ``ceil(i * L_t / L_s)`` for ``i = 1..L_s``."""
    return [-(-i * teacher_layers // student_layers) for i in range(1, student_layers + 1)]


def init_student_from_teacher(student: TransformerModel, teacher: TransformerModel, copy_map: list[int] | None = None) -> None:
    """Overwrite student blocks with copies of teacher blocks.

    ``copy_map[i]`` is the 1-based teacher layer copied into student block
    ``i + 1`` (applied to every stack).  Embeddings and the task head are
    copied too.  Defaults to the evenly spaced selection.
    """
    s_spec, t_spec = student.spec, teacher.spec
    if copy_map is None:
        copy_map = evenly_spaced(s_spec.num_layers, t_spec.num_layers)
    copy_map = [int(c) for c in copy_map]
    if len(copy_map) != s_spec.num_layers:
        raise InitializationError(f"copy_map has {len(copy_map)} entries for a {s_spec.num_layers}-layer student")
    if any(c < 1 or c > t_spec.num_layers for c in copy_map):
        raise InitializationError(f"copy_map {copy_map} out of range for a {t_spec.num_layers}-layer teacher")
    for attr in ("kind", "hidden_dim", "num_heads", "ffn_dim", "vocab_size", "max_seq_len", "num_classes"):
        if getattr(s_spec, attr) != getattr(t_spec, attr):
            raise InitializationError(f"student/teacher {attr} differ: {getattr(s_spec, attr)} vs {getattr(t_spec, attr)}")
    for name, p in student.params.items():
        parts = name.split(".")
        if parts[0] in ("encoder", "decoder"):
            src = f"{parts[0]}.{copy_map[int(parts[1])] - 1}." + ".".join(parts[2:])
        else:
            src = name
        p.data = teacher.params[src].data.copy()
        p.grad = None


# ---------------------------------------------------------------------------
# checkpoints: <dir>/manifest.json + <dir>/params/<name>.kdt


def save_checkpoint(model: TransformerModel, directory, extra: dict | None = None) -> Path:
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    for name, p in model.params.items():
        fname = f"{name}.kdt"
        T.save_tensor(p, directory / "params" / fname)
        entries.append({"name": name, "shape": list(p.shape), "file": f"params/{fname}"})
    manifest = {
        "spec": model.spec.to_dict(),
        "seed": model.seed,
        "fingerprint": model.fingerprint(),
        "parameters": entries,
        **(extra or {}),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load_checkpoint(directory) -> TransformerModel:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    spec = ModelSpec.from_dict(manifest["spec"])
    params = {}
    for entry in manifest["parameters"]:
        t = T.load_tensor(directory / entry["file"], requires_grad=True)
        if list(t.shape) != entry["shape"]:
            raise InitializationError(f"{entry['name']}: stored shape {t.shape} != manifest {entry['shape']}")
        t.name = entry["name"]
        params[entry["name"]] = t
    expected = [n for n, _ in param_shapes(spec)]
    if sorted(params) != sorted(expected):
        raise InitializationError("checkpoint parameters do not match its spec")
    model = TransformerModel(spec, {n: params[n] for n in expected}, manifest.get("seed"))
    return model
