"""Encoder + task head networks for UA parsing.

Each of the four tasks gets its own ``ParserModel``: sinusoidal positions
are added to the embedded tokens, one post-norm encoder layer with masked
multi-head self-attention runs over the sequence, the result is flattened
and fed to a dense SeLU head. Name tasks end in a 7-way softmax, version
tasks in 51 raw scores (one per token slot plus "absent").
"""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .preprocess import DEFAULT_CONFIG as DEFAULT_PREPROCESS
from .preprocess import tokenize

MAGIC = b"UASMDL1"

OS_LABELS = ("Android", "iOS", "iPad", "Linux", "Macintosh", "Windows", "N/A")
SOFTWARE_LABELS = ("Android WebView", "Chrome", "Facebook App", "Instagram",
                   "Internet Explorer", "Opera", "N/A")
VERSION_SLOTS = 51
VERSION_ABSENT = 50


class CheckpointFormatError(ValueError):
    pass


class TaskKind(enum.Enum):
    OS_NAME = "os-name"
    SOFTWARE_NAME = "software-name"
    OS_VERSION = "os-version"
    SOFTWARE_VERSION = "software-version"

    @property
    def is_name(self):
        return self in (TaskKind.OS_NAME, TaskKind.SOFTWARE_NAME)

    @property
    def is_version(self):
        return not self.is_name

    @property
    def labels(self):
        if self in (TaskKind.OS_NAME, TaskKind.OS_VERSION):
            return OS_LABELS
        return SOFTWARE_LABELS

    @property
    def num_outputs(self):
        return len(self.labels) if self.is_name else VERSION_SLOTS

    @property
    def name_field(self):
        return "os_name" if self in (TaskKind.OS_NAME, TaskKind.OS_VERSION) else "software_name"

    @property
    def version_field(self):
        return "os_version" if self in (TaskKind.OS_NAME, TaskKind.OS_VERSION) else "software_version"


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 40
    seq_len: int = 50
    num_heads: int = 2
    ff_dim: int = 128
    head_widths: tuple = (512, 256, 128)
    dropout_p: float = 0.1
    num_outputs: int = 7
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "head_widths", tuple(int(w) for w in self.head_widths))
        if self.d_model % self.num_heads:
            raise ValueError("d_model must be divisible by num_heads")
        if self.d_model % 2:
            raise ValueError("d_model must be even for the positional encoding")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must be in [0, 1)")
        if min((self.seq_len, self.ff_dim, self.num_outputs) + self.head_widths) < 1:
            raise ValueError("all sizes must be positive")

    @property
    def head_dim(self):
        return self.d_model // self.num_heads

    @property
    def flat_width(self):
        return self.seq_len * self.d_model

    @classmethod
    def for_task(cls, task, **overrides):
        return cls(num_outputs=task.num_outputs, **overrides)


@dataclass
class Prediction:
    task: TaskKind
    class_label: str | None = None
    probabilities: np.ndarray | None = None
    index: int | None = None
    raw_scores: np.ndarray | None = None
    tokens: tuple = field(default=(), repr=False)

    @property
    def version(self):
        """Token at the predicted index, or None for the absent slot / padding."""
        if self.index is None or self.index == VERSION_ABSENT or self.index >= len(self.tokens):
            return None
        return self.tokens[self.index]


def positional_encoding(seq_len, d_model, dtype=np.float64):
    if seq_len < 1 or d_model < 2 or d_model % 2:
        raise ValueError("need seq_len >= 1 and an even d_model >= 2")
    pos = np.arange(seq_len, dtype=np.float64)[:, None]
    two_i = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, two_i / d_model)
    pe = np.zeros((seq_len, d_model), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe.astype(dtype)


def _init_dense(rng, fan_in, fan_out, dtype):
    # LeCun normal, the initialization SeLU's self-normalization assumes
    w = rng.normal(0.0, math.sqrt(1.0 / fan_in), size=(fan_in, fan_out)).astype(dtype)
    return w, np.zeros(fan_out, dtype)


class ParserModel:
    def __init__(self, task, config, params=None, dtype=np.float32):
        if config.num_outputs != task.num_outputs:
            raise ValueError(f"{task.value} needs {task.num_outputs} outputs, "
                             f"config has {config.num_outputs}")
        self.task = task
        self.config = config
        if params is None:
            params = self._init_params(dtype)
        self.params = {name: nx.Tensor(np.asarray(v, dtype=dtype), requires_grad=True, name=name)
                       for name, v in params.items()}
        self._pe = positional_encoding(config.seq_len, config.d_model, dtype)

    def _init_params(self, dtype):
        c = self.config
        rng = np.random.default_rng(c.seed)
        p = {}
        d = c.d_model
        for name in ("q", "k", "v", "o"):
            p[f"attn.{name}.weight"], p[f"attn.{name}.bias"] = _init_dense(rng, d, d, dtype)
        p["norm1.scale"] = np.ones(d, dtype)
        p["norm1.offset"] = np.zeros(d, dtype)
        p["ff.0.weight"], p["ff.0.bias"] = _init_dense(rng, d, c.ff_dim, dtype)
        p["ff.1.weight"], p["ff.1.bias"] = _init_dense(rng, c.ff_dim, d, dtype)
        p["norm2.scale"] = np.ones(d, dtype)
        p["norm2.offset"] = np.zeros(d, dtype)
        widths = (c.flat_width,) + c.head_widths + (c.num_outputs,)
        for i in range(len(widths) - 1):
            p[f"head.{i}.weight"], p[f"head.{i}.bias"] = _init_dense(rng, widths[i], widths[i + 1], dtype)
        return p

    @property
    def dtype(self):
        return self._pe.dtype

    def parameters(self):
        return list(self.params.values())

    def astype(self, dtype):
        return ParserModel(self.task, self.config,
                           {k: t.data for k, t in self.params.items()}, dtype=dtype)

    def copy(self):
        return self.astype(self.dtype)

    def state(self):
        return {k: t.data.copy() for k, t in self.params.items()}

    def _dense(self, x, prefix):
        return nx.add(nx.matmul(x, self.params[prefix + ".weight"]), self.params[prefix + ".bias"])

    def encode(self, values, mask, training=False, rng=None, trace=None):
        """Batched encoder: (B, L, D) values and (B, L) mask -> (B, L*D) features."""
        c = self.config
        values = np.asarray(values, dtype=self.dtype)
        if values.ndim == 2:
            values, mask = values[None], np.asarray(mask)[None]
        if values.shape[1:] != (c.seq_len, c.d_model):
            raise nx.ShapeMismatch(f"expected (*, {c.seq_len}, {c.d_model}) input, got {values.shape}")
        batch, seq, d = values.shape
        heads, dk = c.num_heads, c.head_dim
        # token vectors scaled by sqrt(d_model) before positions are added
        x = nx.Tensor(values * np.asarray(math.sqrt(d), dtype=self.dtype) + self._pe)

        def split(t):
            return nx.transpose(nx.reshape(t, (batch, seq, heads, dk)), (0, 2, 1, 3))

        q = split(self._dense(x, "attn.q"))
        k = split(self._dense(x, "attn.k"))
        v = split(self._dense(x, "attn.v"))
        scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
        key_mask = np.asarray(mask, dtype=bool)[:, None, None, :]
        attn = nx.softmax(scores, axis=-1, mask=key_mask)
        if trace is not None:
            trace["attention"] = attn.data
        ctx = nx.reshape(nx.transpose(nx.matmul(attn, v), (0, 2, 1, 3)), (batch, seq, d))
        h = nx.layer_norm(nx.add(x, self._dense(ctx, "attn.o")),
                          self.params["norm1.scale"], self.params["norm1.offset"])
        ff = self._dense(nx.relu(self._dense(h, "ff.0")), "ff.1")
        h = nx.layer_norm(nx.add(h, ff), self.params["norm2.scale"], self.params["norm2.offset"])
        return nx.reshape(h, (batch, seq * d))

    def head(self, features, training=False, rng=None):
        """Dense SeLU stack over (B, flat_width) features -> (B, num_outputs) raw scores."""
        n_hidden = len(self.config.head_widths)
        x = features
        for i in range(n_hidden):
            x = nx.selu(self._dense(x, f"head.{i}"))
            if i < 3:
                x = nx.dropout(x, self.config.dropout_p, rng, training=training)
        return self._dense(x, f"head.{n_hidden}")

    def forward(self, values, mask, training=False, rng=None):
        if training and self.config.dropout_p > 0 and rng is None:
            raise ValueError("training mode with dropout needs a random generator")
        return self.head(self.encode(values, mask, training, rng), training, rng)

    def predict_batch(self, values, mask, token_lists=None):
        scores = self.forward(values, mask, training=False).data
        out = []
        for b in range(scores.shape[0]):
            tokens = tuple(token_lists[b]) if token_lists is not None else ()
            out.append(_to_prediction(self.task, scores[b], tokens))
        return out

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(to_bytes(self))

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return from_bytes(fh.read())


def _to_prediction(task, scores, tokens=()):
    if task.is_name:
        probs = nx.softmax(nx.Tensor(scores)).data
        idx = int(np.argmax(probs))
        return Prediction(task, class_label=task.labels[idx], probabilities=probs, tokens=tokens)
    return Prediction(task, index=int(np.argmax(scores)), raw_scores=np.array(scores), tokens=tokens)


def encoder_forward(x, model, training=False, rng=None):
    """Single-example encoder pass over a ``UasMatrix``; returns the flat feature vector."""
    return model.encode(x.values, x.mask, training, rng).data[0]


def head_forward(features, model, training=False, rng=None):
    scores = model.head(nx.Tensor(np.asarray(features, dtype=model.dtype)[None]), training, rng).data[0]
    return _to_prediction(model.task, scores)


def predict(model, emb, raw, preprocess_config=DEFAULT_PREPROCESS):
    if emb.dim != model.config.d_model:
        raise nx.ShapeMismatch(f"embedding dim {emb.dim} != model d_model {model.config.d_model}")
    uas = tokenize(raw, preprocess_config)
    m = emb.embed_uas(uas, model.config.seq_len)
    return model.predict_batch(m.values[None], m.mask[None], [uas.tokens])[0]


_HEADER = struct.Struct("<I")


def to_bytes(model):
    header = json.dumps({"task": model.task.value, "config": asdict(model.config)},
                        sort_keys=True).encode("utf-8")
    parts = [MAGIC, _HEADER.pack(len(header)), header, struct.pack("<I", len(model.params))]
    for name in sorted(model.params):
        data = model.params[name].data
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(np.ascontiguousarray(data, dtype="<f4").tobytes())
    return b"".join(parts)


def from_bytes(blob):
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError("not a model checkpoint (bad magic)")
    try:
        task, config, params = _parse_body(blob)
    except (struct.error, ValueError, KeyError, TypeError) as exc:
        if isinstance(exc, CheckpointFormatError):
            raise
        raise CheckpointFormatError(f"truncated or malformed checkpoint: {exc}") from exc
    expected = param_shapes(config)
    if set(expected) != set(params):
        raise CheckpointFormatError("checkpoint tensors do not match the model layout")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise CheckpointFormatError(f"tensor {name} has shape {params[name].shape}, expected {shape}")
    return ParserModel(task, config, params)


def _parse_body(blob):
    off = len(MAGIC)
    (hlen,) = _HEADER.unpack_from(blob, off)
    off += 4
    header = json.loads(blob[off:off + hlen].decode("utf-8"))
    off += hlen
    task = TaskKind(header["task"])
    config = ModelConfig(**header["config"])
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        n = int(np.prod(shape))
        params[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
        off += 4 * n
    if off != len(blob):
        raise CheckpointFormatError(f"{len(blob) - off} trailing bytes in checkpoint")
    return task, config, params


def param_shapes(config):
    d = config.d_model
    shapes = {}
    for name in ("q", "k", "v", "o"):
        shapes[f"attn.{name}.weight"] = (d, d)
        shapes[f"attn.{name}.bias"] = (d,)
    shapes.update({"norm1.scale": (d,), "norm1.offset": (d,), "norm2.scale": (d,), "norm2.offset": (d,),
                   "ff.0.weight": (d, config.ff_dim), "ff.0.bias": (config.ff_dim,),
                   "ff.1.weight": (config.ff_dim, d), "ff.1.bias": (d,)})
    widths = (config.flat_width,) + config.head_widths + (config.num_outputs,)
    for i in range(len(widths) - 1):
        shapes[f"head.{i}.weight"] = (widths[i], widths[i + 1])
        shapes[f"head.{i}.bias"] = (widths[i + 1],)
    return shapes
