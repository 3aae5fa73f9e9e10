"""Dataset ingestion, labels, stratified splitting, training and metrics."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .model import VERSION_ABSENT, ModelConfig, ParserModel, TaskKind
from .preprocess import DEFAULT_CONFIG as DEFAULT_PREPROCESS
from .preprocess import RawUas, apply_substitutions, tokenize

log = logging.getLogger(__name__)

NAME_LR = 0.0005
VERSION_LR = 0.005
WEIGHT_DECAY = 1e-5
BATCH_SIZE = 200
NA = "N/A"


class FormatError(ValueError):
    pass


class MissingClass(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


class EmptyEvaluationSet(ValueError):
    pass


@dataclass(frozen=True)
class LabeledExample:
    raw: RawUas
    os_name: str | None = None
    os_version: str | None = None
    software_name: str | None = None
    software_version: str | None = None
    source_cidr: str | None = None

    @classmethod
    def from_record(cls, rec):
        if not isinstance(rec, dict) or not isinstance(rec.get("ua"), str):
            raise FormatError("record needs a string 'ua' field")
        fields = {}
        for key in ("os_name", "os_version", "software_name", "software_version", "source_cidr"):
            value = rec.get(key)
            fields[key] = None if value in (None, "") else str(value)
        return cls(RawUas(rec["ua"]), **fields)

    def to_record(self):
        rec = {"ua": self.raw.text}
        for key in ("os_name", "os_version", "software_name", "software_version", "source_cidr"):
            value = getattr(self, key)
            if value is not None:
                rec[key] = value
        return rec


@dataclass
class IngestResult:
    examples: list
    skipped_count: int = 0

    def __iter__(self):
        return iter(self.examples)

    def __len__(self):
        return len(self.examples)


def iter_jsonl(lines):
    """Yield (record or None) per non-blank line; None marks a malformed line."""
    for line in lines:
        if not line.strip():
            continue
        try:
            yield json.loads(line)
        except json.JSONDecodeError:
            yield None


def ingest(path):
    examples, skipped = [], 0
    with open(path, encoding="utf-8") as fh:
        for rec in iter_jsonl(fh):
            try:
                if rec is None:
                    raise FormatError("invalid JSON")
                examples.append(LabeledExample.from_record(rec))
            except FormatError:
                skipped += 1
    if not examples:
        raise FormatError(f"{path}: no parsable records ({skipped} malformed)")
    if skipped:
        log.warning("%s: skipped %d malformed lines", path, skipped)
    return IngestResult(examples, skipped)


@dataclass(frozen=True)
class ClassSpec:
    task: TaskKind
    labels: tuple

    @classmethod
    def for_task(cls, task):
        return cls(task, task.labels)

    def class_of(self, example):
        value = getattr(example, self.task.name_field)
        if value is None:
            return NA
        folded = value.strip().casefold()
        for label in self.labels:
            if label.casefold() == folded:
                return label
        return NA

    def index_of(self, example):
        return self.labels.index(self.class_of(example))


def build_version_label(example, task, config=DEFAULT_PREPROCESS):
    """Token index of the labelled version in the tokenized UAS, or 50 if absent."""
    if not task.is_version:
        raise ValueError(f"{task.value} is not a version task")
    version = getattr(example, task.version_field)
    if not version:
        return VERSION_ABSENT
    target = apply_substitutions(version, config)
    if not target:
        return VERSION_ABSENT
    tokens = tokenize(example.raw, config).tokens
    for i, token in enumerate(tokens):
        if token == target:
            return i if i < VERSION_ABSENT else VERSION_ABSENT
    return VERSION_ABSENT


def target_of(example, task, config=DEFAULT_PREPROCESS):
    if task.is_name:
        return ClassSpec.for_task(task).index_of(example)
    return build_version_label(example, task, config)


@dataclass(frozen=True)
class TrainConfig:
    task: TaskKind
    batch_size: int = BATCH_SIZE
    learning_rate: float | None = None
    weight_decay: float = WEIGHT_DECAY
    epochs: int = 10
    split_fraction: float = 0.7
    per_class_quota: int | None = None
    seed: int = 0
    loss: str | None = None

    def __post_init__(self):
        if not 0 < self.split_fraction < 1:
            raise ValueError("split_fraction must be in (0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.learning_rate is None:
            object.__setattr__(self, "learning_rate",
                               NAME_LR if self.task.is_name else VERSION_LR)
        if self.loss is None:
            object.__setattr__(self, "loss", "bce" if self.task.is_name else "ce")
        if self.loss not in ("bce", "ce"):
            raise ValueError("loss must be 'bce' or 'ce'")
        if self.per_class_quota is not None and self.per_class_quota < 1:
            raise ValueError("per_class_quota must be positive")


def balance_and_split(data, spec, config):
    """Per-class seeded downsampling to the quota, then a per-class train/validation split."""
    rng = np.random.default_rng(config.seed)
    by_class = {label: [] for label in spec.labels}
    for ex in data:
        by_class[spec.class_of(ex)].append(ex)
    train, valid = [], []
    for label in spec.labels:
        members = by_class[label]
        if not members:
            raise MissingClass(f"class {label!r} has no examples")
        order = rng.permutation(len(members))
        if config.per_class_quota is not None:
            order = order[:config.per_class_quota]
        n_train = int(round(len(order) * config.split_fraction))
        train.extend(members[i] for i in order[:n_train])
        valid.extend(members[i] for i in order[n_train:])
    train = [train[i] for i in rng.permutation(len(train))]
    valid = [valid[i] for i in rng.permutation(len(valid))]
    return train, valid


@dataclass
class EncodedSet:
    values: np.ndarray
    mask: np.ndarray
    targets: np.ndarray
    tokens: list


def encode_examples(examples, task, emb, seq_len=50, preprocess_config=DEFAULT_PREPROCESS):
    tokenized = [tokenize(ex.raw, preprocess_config) for ex in examples]
    values, mask = emb.embed_batch(tokenized, seq_len)
    targets = np.array([target_of(ex, task, preprocess_config) for ex in examples], dtype=np.int64)
    return EncodedSet(values, mask, targets, [t.tokens for t in tokenized])


@dataclass
class TrainResult:
    model: ParserModel
    loss_log: list = field(default_factory=list)

    def write_loss_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "mean_loss"])
            for epoch, loss in self.loss_log:
                writer.writerow([epoch, repr(loss)])


def batch_loss(model, values, mask, targets, loss_kind, training, rng):
    logits = model.forward(values, mask, training=training, rng=rng)
    if loss_kind == "ce":
        return nx.cross_entropy_loss(logits, targets)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(targets)), targets] = 1
    return nx.binary_cross_entropy_loss(nx.softmax(logits, axis=-1), onehot)


def train(task, data, emb, mconfig=None, tconfig=None, model=None, callback=None):
    """Mini-batch SGD over ``data`` (LabeledExamples or an EncodedSet)."""
    tconfig = tconfig or TrainConfig(task)
    mconfig = mconfig or ModelConfig.for_task(task)
    if tconfig.task != task or mconfig.num_outputs != task.num_outputs:
        raise ValueError("model/train configuration does not match the task")
    if emb is not None and emb.dim != mconfig.d_model:
        raise nx.ShapeMismatch(f"embedding dim {emb.dim} != d_model {mconfig.d_model}")
    encoded = data if isinstance(data, EncodedSet) else encode_examples(data, task, emb, mconfig.seq_len)
    if len(encoded.targets) == 0:
        raise ValueError("empty training set")
    model = model or ParserModel(task, mconfig)
    rng = np.random.default_rng(tconfig.seed)
    sgd = nx.SgdConfig(tconfig.learning_rate, tconfig.weight_decay)
    params = model.parameters()
    result = TrainResult(model)
    n = len(encoded.targets)
    for epoch in range(1, tconfig.epochs + 1):
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for b, start in enumerate(range(0, n, tconfig.batch_size)):
            idx = order[start:start + tconfig.batch_size]
            loss = batch_loss(model, encoded.values[idx], encoded.mask[idx], encoded.targets[idx],
                              tconfig.loss, True, rng)
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}, batch {b}")
            loss.backward()
            nx.sgd_step(params, sgd)
            total += value
            batches += 1
        mean_loss = total / batches
        result.loss_log.append((epoch, mean_loss))
        log.info("%s epoch %d mean loss %.6f", task.value, epoch, mean_loss)
        if callback is not None:
            callback(epoch, mean_loss, model)
    return result


@dataclass
class ClassMetrics:
    label: str
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricsReport:
    task: str
    per_class: list
    overall_accuracy: float
    total: int
    per_version: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d):
        return cls(task=d["task"], per_class=[ClassMetrics(**c) for c in d["per_class"]],
                   overall_accuracy=d["overall_accuracy"], total=d["total"],
                   per_version=[ClassMetrics(**c) for c in d.get("per_version", [])])

    def table(self):
        rows = [f"{'class':<22}{'precision':>10}{'recall':>10}{'f1':>10}{'support':>10}"]
        for c in self.per_class:
            rows.append(f"{c.label:<22}{c.precision:>10.3f}{c.recall:>10.3f}{c.f1:>10.3f}{c.support:>10d}")
        rows.append(f"overall accuracy {self.overall_accuracy:.4f} over {self.total} examples")
        return "\n".join(rows)


def confusion_matrix(truth, predicted, n_classes):
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(truth), np.asarray(predicted)), 1)
    return cm


def metrics_from_confusion(cm, labels):
    """One-vs-rest precision/recall/F1 per class; rows are the truth."""
    out = []
    for i, label in enumerate(labels):
        tp = int(cm[i, i])
        predicted = int(cm[:, i].sum())
        support = int(cm[i, :].sum())
        precision = tp / predicted if predicted else 0.0
        recall = tp / support if support else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        out.append(ClassMetrics(label, precision, recall, f1, support))
    return out


def _label_metrics(truth, predicted):
    labels = sorted(set(truth))
    extra = sorted(set(predicted) - set(labels))
    index = {label: i for i, label in enumerate(labels + extra)}
    cm = confusion_matrix([index[t] for t in truth], [index[p] for p in predicted], len(index))
    return metrics_from_confusion(cm, labels)


def predict_encoded(model, encoded, batch_size=BATCH_SIZE):
    scores = []
    for start in range(0, len(encoded.targets), batch_size):
        sl = slice(start, start + batch_size)
        scores.append(model.forward(encoded.values[sl], encoded.mask[sl], training=False).data)
    return np.argmax(np.concatenate(scores), axis=1)


def evaluate(model, emb, data):
    task = model.task
    if isinstance(data, EncodedSet):
        encoded = data
    else:
        data = list(data)
        if not data:
            raise EmptyEvaluationSet("evaluation set is empty")
        encoded = encode_examples(data, task, emb, model.config.seq_len)
    if len(encoded.targets) == 0:
        raise EmptyEvaluationSet("evaluation set is empty")
    predicted = predict_encoded(model, encoded)
    truth = encoded.targets
    accuracy = float(np.mean(predicted == truth))
    if task.is_name:
        cm = confusion_matrix(truth, predicted, task.num_outputs)
        return MetricsReport(task.value, metrics_from_confusion(cm, list(task.labels)),
                             accuracy, int(len(truth)))
    slot_labels = [str(i) for i in range(VERSION_ABSENT)] + ["absent"]
    cm = confusion_matrix(truth, predicted, task.num_outputs)
    # only slots that occur in the truth or the predictions
    per_slot = [c for i, c in enumerate(metrics_from_confusion(cm, slot_labels))
                if c.support or cm[:, i].any()]

    def version_at(tokens, idx):
        return tokens[idx] if idx < len(tokens) else "absent"

    true_versions = [version_at(t, i) for t, i in zip(encoded.tokens, truth)]
    pred_versions = [version_at(t, i) for t, i in zip(encoded.tokens, predicted)]
    return MetricsReport(task.value, per_slot, accuracy, int(len(truth)),
                         per_version=_label_metrics(true_versions, pred_versions))
