"""Experiment protocol: disjoint-task training, frozen labeling and evaluation.

Training presents every scheduled sample once, in order, with learning on.
After each task the network is frozen, neurons are labeled by the class
they fire most for on the training samples seen so far, and the test
samples of all seen classes are scored. Earlier tasks are never replayed.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import struct
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .engine import EngineConfig, NetworkState, frozen_response, init_network, run_sample
from .ingest import RawDataset, Task, TaskSchedule

log = logging.getLogger(__name__)

N_CLASSES = 10
UNCLASSIFIED = -1


class UnclassifiableError(RuntimeError):
    """The network stayed silent even at the highest input rate."""


# -- labeling and prediction ---------------------------------------------------------


@dataclass
class LabelMap:
    labels: np.ndarray  # (M,) class id, -1 for unassigned
    counts: np.ndarray  # (M, 10) assignment spikes per class

    @classmethod
    def from_counts(cls, counts: np.ndarray) -> "LabelMap":
        counts = np.asarray(counts, dtype=np.int64)
        labels = counts.argmax(axis=1)  # argmax picks the lowest class on ties
        labels[counts.sum(axis=1) == 0] = UNCLASSIFIED
        return cls(labels, counts)

    @property
    def n_assigned(self) -> int:
        return int(np.sum(self.labels >= 0))


@dataclass
class Responses:
    """Sparse per-sample spike counts of a frozen network (CSR layout)."""

    ptr: np.ndarray
    neurons: np.ndarray
    counts: np.ndarray
    n_neurons: int

    def __len__(self) -> int:
        return len(self.ptr) - 1

    def dense(self, i: int) -> np.ndarray:
        out = np.zeros(self.n_neurons, dtype=np.int64)
        s, e = self.ptr[i], self.ptr[i + 1]
        out[self.neurons[s:e]] = self.counts[s:e]
        return out

    def per_class(self, labels) -> np.ndarray:
        labels = np.asarray(labels)
        rows = np.repeat(np.arange(len(self)), np.diff(self.ptr))
        out = np.zeros((self.n_neurons, N_CLASSES), dtype=np.int64)
        np.add.at(out, (self.neurons, labels[rows]), self.counts)
        return out

    def predict(self, label_map: LabelMap) -> np.ndarray:
        return np.array([predict_from_counts(self.dense(i), label_map) for i in range(len(self))],
                        dtype=np.int64)


def predict_from_counts(counts, label_map: LabelMap) -> int:
    """Population vote: class with most spikes from its neurons.

    Ties go to the class with the larger spikes-per-neuron, then the lower id.
    Returns -1 when no labeled neuron spiked.
    """
    counts = np.asarray(counts)
    labels = label_map.labels
    assigned = labels >= 0
    if not np.any(counts[assigned]):
        return UNCLASSIFIED
    totals = np.bincount(labels[assigned], weights=counts[assigned], minlength=N_CLASSES)
    sizes = np.bincount(labels[assigned], minlength=N_CLASSES)
    best = totals.max()
    tied = np.flatnonzero(totals == best)
    if len(tied) == 1:
        return int(tied[0])
    means = totals[tied] / sizes[tied]
    return int(tied[np.flatnonzero(means == means.max())[0]])


@contextmanager
def frozen(state: NetworkState):
    """Disable learning for the duration of the block."""
    prev = state.learning_enabled
    state.learning_enabled = False
    try:
        yield state
    finally:
        state.learning_enabled = prev


def collect_responses(state: NetworkState, rates: np.ndarray, rng: np.random.Generator,
                      config: EngineConfig) -> Responses:
    ptr = [0]
    neurons, counts = [], []
    with frozen(state):
        for x in rates:
            c, _ = frozen_response(state, x, rng, config)
            nz = np.flatnonzero(c)
            neurons.append(nz)
            counts.append(c[nz])
            ptr.append(ptr[-1] + len(nz))
    cat = lambda parts, dt: np.concatenate(parts).astype(dt) if parts else np.zeros(0, dt)
    return Responses(np.asarray(ptr, dtype=np.int64), cat(neurons, np.int64),
                     cat(counts, np.int64), state.n_neurons)


def classify_sample(state: NetworkState, rates, label_map: LabelMap,
                    rng: np.random.Generator, config: EngineConfig) -> tuple[int, np.ndarray]:
    """Predicted class and per-neuron spike counts for one sample."""
    with frozen(state):
        counts, _ = frozen_response(state, rates, rng, config)
    if counts.sum() == 0:
        raise UnclassifiableError("no output spikes even at the maximum input rate")
    return predict_from_counts(counts, label_map), counts


def assign_labels(state: NetworkState, rates: np.ndarray, labels, rng: np.random.Generator,
                  config: EngineConfig) -> LabelMap:
    responses = collect_responses(state, rates, rng, config)
    return LabelMap.from_counts(responses.per_class(labels))


# -- metrics ---------------------------------------------------------------------------


@dataclass
class StageMetrics:
    stage: int
    classes_seen: tuple[int, ...]
    accuracy: float
    per_class_accuracy: dict[int, float]
    false_positives: dict[int, int]
    n_per_class: dict[int, int]
    confusion: np.ndarray  # (10, 11); last column counts unclassified samples

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = self.confusion.tolist()
        d["classes_seen"] = list(self.classes_seen)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StageMetrics":
        return cls(
            stage=d["stage"],
            classes_seen=tuple(d["classes_seen"]),
            accuracy=d["accuracy"],
            per_class_accuracy={int(k): v for k, v in d["per_class_accuracy"].items()},
            false_positives={int(k): v for k, v in d["false_positives"].items()},
            n_per_class={int(k): v for k, v in d["n_per_class"].items()},
            confusion=np.asarray(d["confusion"], dtype=np.int64),
        )


def metrics_from_predictions(predictions, labels, classes_seen, stage: int = 0) -> StageMetrics:
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(labels, dtype=np.int64)
    confusion = np.zeros((N_CLASSES, N_CLASSES + 1), dtype=np.int64)
    col = np.where(pred < 0, N_CLASSES, pred)
    np.add.at(confusion, (true, col), 1)
    classes = tuple(int(c) for c in classes_seen)
    per_class, fps, ns = {}, {}, {}
    for c in classes:
        n = int(confusion[c].sum())
        ns[c] = n
        per_class[c] = float(confusion[c, c] / n) if n else float("nan")
        fps[c] = int(confusion[:, c].sum() - confusion[c, c])
    accuracy = float(np.mean(pred == true)) if len(true) else float("nan")
    return StageMetrics(stage, classes, accuracy, per_class, fps, ns, confusion)


def evaluate(state: NetworkState, label_map: LabelMap, rates: np.ndarray, labels,
             rng: np.random.Generator, config: EngineConfig, stage: int = 0,
             classes_seen=None) -> StageMetrics:
    labels = np.asarray(labels)
    responses = collect_responses(state, rates, rng, config)
    if classes_seen is None:
        classes_seen = sorted(set(labels.tolist()))
    return metrics_from_predictions(responses.predict(label_map), labels, classes_seen, stage)


def training_accuracy(state: NetworkState, train: RawDataset, rng: np.random.Generator,
                      config: EngineConfig, rates: np.ndarray | None = None):
    """Label on the training set, then score the same frozen responses.

    Returns (accuracy, label map, metrics).
    """
    rates = train.rates() if rates is None else rates
    responses = collect_responses(state, rates, rng, config)
    label_map = LabelMap.from_counts(responses.per_class(train.labels))
    metrics = metrics_from_predictions(responses.predict(label_map), train.labels,
                                       sorted(set(train.labels.tolist())))
    return metrics.accuracy, label_map, metrics


# -- checkpoints -----------------------------------------------------------------------

MAGIC = b"CFN1"
FORMAT_VERSION = 1
_HEADER = struct.Struct(">4sIQ")


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    state: NetworkState
    config: EngineConfig
    rng_state: dict
    schedule: TaskSchedule
    position: tuple[int, int] = (0, 0)  # (task index, samples done within task)
    metrics: list[StageMetrics] = field(default_factory=list)
    eval_seed: int = 0
    version: int = FORMAT_VERSION


def _encode(ckpt: Checkpoint) -> bytes:
    s = ckpt.state
    arrays = {f"state_{name}": getattr(s, name) for name in NetworkState.ARRAYS}
    for t, task in enumerate(ckpt.schedule.tasks):
        arrays[f"task_{t}"] = task.indices
    meta = {
        "clock": s.clock,
        "dop_deadline": s.dop_deadline,
        "learning_enabled": s.learning_enabled,
        "tau_pre": s._tau_pre,
        "config": ckpt.config.to_dict(),
        "rng_state": ckpt.rng_state,
        "schedule": {
            "epochs": ckpt.schedule.epochs,
            "seed": ckpt.schedule.seed,
            "class_order": list(ckpt.schedule.class_order),
            "task_classes": [list(t.classes) for t in ckpt.schedule.tasks],
        },
        "position": list(ckpt.position),
        "metrics": [m.to_dict() for m in ckpt.metrics],
        "eval_seed": ckpt.eval_seed,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    payload = _encode(ckpt)
    digest = hashlib.sha256(payload).digest()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(_HEADER.pack(MAGIC, ckpt.version, len(payload)) + payload + digest)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointCorruptError("file shorter than header")
    magic, version, length = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointCorruptError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"format version {version}, expected {FORMAT_VERSION}")
    body = raw[_HEADER.size:]
    if len(body) != length + 32:
        raise CheckpointCorruptError("truncated or padded checkpoint")
    payload, digest = body[:length], body[length:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointCorruptError("checksum mismatch")
    with np.load(io.BytesIO(payload)) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(arrays.pop("meta").tobytes().decode())
    state = NetworkState(
        **{name: arrays[f"state_{name}"] for name in NetworkState.ARRAYS},
        clock=meta["clock"],
        dop_deadline=meta["dop_deadline"],
        learning_enabled=meta["learning_enabled"],
        _tau_pre=meta["tau_pre"],
    )
    sm = meta["schedule"]
    tasks = [Task(tuple(c), arrays[f"task_{t}"]) for t, c in enumerate(sm["task_classes"])]
    schedule = TaskSchedule(tasks, sm["epochs"], sm["seed"], tuple(sm["class_order"]))
    return Checkpoint(
        state=state,
        config=EngineConfig.from_dict(meta["config"]),
        rng_state=meta["rng_state"],
        schedule=schedule,
        position=tuple(meta["position"]),
        metrics=[StageMetrics.from_dict(m) for m in meta["metrics"]],
        eval_seed=meta["eval_seed"],
        version=version,
    )


# -- training --------------------------------------------------------------------------


def _capped_indices(labels: np.ndarray, classes, per_class: int | None, seed: int) -> np.ndarray:
    """Indices of samples in ``classes``; at most ``per_class`` of each, chosen by seed."""
    rng = np.random.default_rng([seed, 0xA551])
    out = []
    for c in classes:
        members = np.flatnonzero(labels == c)
        if per_class is not None and len(members) > per_class:
            members = np.sort(rng.choice(members, per_class, replace=False))
        out.append(members)
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def stage_evaluation(state: NetworkState, config: EngineConfig, train: RawDataset,
                     test: RawDataset, classes_seen, stage: int, eval_seed: int,
                     train_rates=None, test_rates=None, assign_per_class: int | None = None,
                     eval_per_class: int | None = None) -> StageMetrics:
    """Freeze, label on seen training classes, score seen test classes."""
    before = state.fingerprint()
    a_idx = _capped_indices(train.labels, classes_seen, assign_per_class, eval_seed)
    e_idx = _capped_indices(test.labels, classes_seen, eval_per_class, eval_seed + 1)
    train_rates = train.rates() if train_rates is None else train_rates
    test_rates = test.rates() if test_rates is None else test_rates
    label_map = assign_labels(state, train_rates[a_idx], train.labels[a_idx],
                              np.random.default_rng([eval_seed, stage, 1]), config)
    metrics = evaluate(state, label_map, test_rates[e_idx], test.labels[e_idx],
                       np.random.default_rng([eval_seed, stage, 2]), config, stage=stage,
                       classes_seen=classes_seen)
    assert state.fingerprint() == before, "frozen evaluation mutated the network"
    return metrics


def train_disjoint(config: EngineConfig, schedule: TaskSchedule, train: RawDataset,
                   rng: np.random.Generator, test: RawDataset | None = None, *,
                   state: NetworkState | None = None, eval_seed: int = 0,
                   assign_per_class: int | None = None, eval_per_class: int | None = None,
                   evaluate_stages: bool = True, resume: Checkpoint | None = None,
                   checkpoint_path=None, checkpoint_every: int | None = None,
                   on_sample: Callable[[int, int], None] | None = None,
                   stop_after: int | None = None):
    """Run the curriculum. Returns (state, list of StageMetrics).

    ``test`` defaults to ``train``. ``resume`` continues from a checkpoint,
    restoring the generator state. ``stop_after`` halts after that many
    presentations in this call (used to produce mid-schedule checkpoints).
    """
    test = train if test is None else test
    train_rates = train.rates()
    test_rates = train_rates if test is train else test.rates()
    metrics: list[StageMetrics] = []
    start_task, start_offset = 0, 0
    if resume is not None:
        state = resume.state
        config = resume.config
        schedule = resume.schedule
        rng.bit_generator.state = resume.rng_state
        start_task, start_offset = resume.position
        metrics = list(resume.metrics)
        eval_seed = resume.eval_seed
    elif state is None:
        state = init_network(config, rng)

    def checkpoint(position):
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, Checkpoint(
                state, config, rng.bit_generator.state, schedule, position, metrics, eval_seed))

    seen: list[int] = []
    for t in range(start_task):
        seen.extend(c for c in schedule.tasks[t].classes if c not in seen)
    presented = 0
    for t in range(start_task, len(schedule.tasks)):
        task = schedule.tasks[t]
        seen.extend(c for c in task.classes if c not in seen)
        offset = start_offset if t == start_task else 0
        for pos in range(offset, len(task.indices)):
            idx = int(task.indices[pos])
            run_sample(state, train_rates[idx], "train", rng, config)
            if on_sample is not None:
                on_sample(t, idx)
            presented += 1
            if checkpoint_every and presented % checkpoint_every == 0:
                checkpoint((t, pos + 1))
            if stop_after is not None and presented >= stop_after:
                checkpoint((t, pos + 1))
                return state, metrics
        log.info("task %d %s done (%d samples)", t, task.classes, len(task.indices))
        if evaluate_stages:
            m = stage_evaluation(state, config, train, test, tuple(sorted(seen)), t, eval_seed,
                                 train_rates, test_rates, assign_per_class, eval_per_class)
            log.info("stage %d accuracy %.4f", t, m.accuracy)
            metrics.append(m)
        checkpoint((t + 1, 0))
    return state, metrics


# -- output files ----------------------------------------------------------------------


def write_metrics_csv(path, metrics: list[StageMetrics]) -> None:
    lines = ["stage,class,accuracy,false_positives,n"]
    for m in metrics:
        for c in m.classes_seen:
            lines.append(f"{m.stage},{c},{m.per_class_accuracy[c]:.6f},{m.false_positives[c]},"
                         f"{m.n_per_class[c]}")
        lines.append(f"{m.stage},all,{m.accuracy:.6f},,{sum(m.n_per_class.values())}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_summary_json(path, summary: dict) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
