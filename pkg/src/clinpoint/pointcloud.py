"""Clinical events, availability/label masks, dataset files and point clouds."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .nn import MLP, ParamStore
from .numcore import Tensor, ops

DEFAULT_HORIZON = 48.0


class IngestError(ValueError):
    """Raised for malformed dataset files; carries per-line messages."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems[:10]) + (" ..." if len(problems) > 10 else ""))


@dataclass(frozen=True)
class ClinicalEvent:
    content: np.ndarray
    timestamp: float
    modality: int
    case_id: int


@dataclass(eq=False)
class EventBatch:
    """Columnar set of events for a group of cases.

    Events are sorted by (case, modality, timestamp). ``case_index`` maps each
    event to its row in the per-case arrays (``case_ids``, ``availability``,
    ``label_mask``, ``labels``). ``features[m]`` holds the content vectors of
    modality ``m`` events in event order; ``feature_row[k]`` is the row of
    event ``k`` inside its modality's matrix.
    """

    case_ids: np.ndarray
    times: np.ndarray
    modality: np.ndarray
    case_index: np.ndarray
    features: list[np.ndarray]
    feature_row: np.ndarray
    label_mask: np.ndarray
    labels: np.ndarray
    num_modalities: int
    horizon: float = DEFAULT_HORIZON
    availability: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        B, M = len(self.case_ids), self.num_modalities
        if len(self.times) and (self.modality.min() < 0 or self.modality.max() >= M):
            raise ValueError(f"modality id outside [0, {M})")
        if len(self.times) and (self.times.min() < 0 or self.times.max() > self.horizon):
            raise ValueError(f"timestamp outside [0, {self.horizon}]")
        avail = np.zeros((B, M), dtype=bool)
        avail[self.case_index, self.modality] = True
        if B and not avail.any(axis=1).all():
            empty = self.case_ids[~avail.any(axis=1)]
            raise ValueError(f"cases without any event: {empty[:5].tolist()}")
        self.availability = avail
        self.label_mask = np.asarray(self.label_mask, dtype=bool)
        self.labels = np.asarray(self.labels, dtype=np.int64)

    # -- construction -----------------------------------------------------
    @classmethod
    def from_events(cls, events: Iterable[ClinicalEvent], labels: dict[int, tuple[int, bool]],
                    num_modalities: int, horizon: float = DEFAULT_HORIZON,
                    feature_dims: Sequence[int] | None = None) -> "EventBatch":
        """Build a batch from event objects. ``labels`` maps case id to
        ``(label, observed)``; every case listed there must have events."""
        evs = sorted(events, key=lambda e: (e.case_id, e.modality, e.timestamp))
        case_ids = np.array(sorted(labels), dtype=np.int64)
        pos = {c: i for i, c in enumerate(case_ids)}
        for e in evs:
            if e.case_id not in pos:
                raise ValueError(f"event for case {e.case_id} without label record")
        mods = np.array([e.modality for e in evs], dtype=np.int64)
        if feature_dims is None:
            feature_dims = [0] * num_modalities
            for e in evs:
                feature_dims[e.modality] = len(e.content)
        feats: list[list[np.ndarray]] = [[] for _ in range(num_modalities)]
        rows = np.zeros(len(evs), dtype=np.int64)
        for k, e in enumerate(evs):
            if len(e.content) != feature_dims[e.modality]:
                raise ValueError(f"case {e.case_id}: modality {e.modality} content has "
                                 f"{len(e.content)} features, expected {feature_dims[e.modality]}")
            rows[k] = len(feats[e.modality])
            feats[e.modality].append(np.asarray(e.content, dtype=np.float64))
        features = [np.array(f, dtype=np.float64).reshape(len(f), feature_dims[m])
                    for m, f in enumerate(feats)]
        return cls(
            case_ids=case_ids,
            times=np.array([e.timestamp for e in evs], dtype=np.float64),
            modality=mods,
            case_index=np.array([pos[e.case_id] for e in evs], dtype=np.int64),
            features=features,
            feature_row=rows,
            label_mask=np.array([labels[c][1] for c in case_ids], dtype=bool),
            labels=np.array([labels[c][0] for c in case_ids], dtype=np.int64),
            num_modalities=num_modalities,
            horizon=horizon,
        )

    # -- views --------------------------------------------------------------
    @property
    def num_cases(self) -> int:
        return len(self.case_ids)

    @property
    def num_events(self) -> int:
        return len(self.times)

    @property
    def feature_dims(self) -> list[int]:
        return [f.shape[1] for f in self.features]

    @cached_property
    def case_starts(self) -> np.ndarray:
        return np.searchsorted(self.case_index, np.arange(self.num_cases + 1))

    def content(self, k: int) -> np.ndarray:
        return self.features[self.modality[k]][self.feature_row[k]]

    @property
    def events(self) -> list[ClinicalEvent]:
        return [ClinicalEvent(self.content(k), float(self.times[k]), int(self.modality[k]),
                              int(self.case_ids[self.case_index[k]]))
                for k in range(self.num_events)]

    def subset(self, cases: Sequence[int]) -> "EventBatch":
        """Batch restricted to the given case rows (kept in the given order)."""
        cases = np.asarray(cases, dtype=np.int64)
        starts = self.case_starts
        ev = np.concatenate([np.arange(starts[c], starts[c + 1]) for c in cases]) if len(cases) \
            else np.zeros(0, dtype=np.int64)
        new_case = np.repeat(np.arange(len(cases)), starts[cases + 1] - starts[cases])
        mods = self.modality[ev]
        feats, rows = [], np.zeros(len(ev), dtype=np.int64)
        for m in range(self.num_modalities):
            sel = mods == m
            feats.append(self.features[m][self.feature_row[ev[sel]]])
            rows[sel] = np.arange(sel.sum())
        return EventBatch(
            case_ids=self.case_ids[cases], times=self.times[ev], modality=mods,
            case_index=new_case, features=feats, feature_row=rows,
            label_mask=self.label_mask[cases], labels=self.labels[cases],
            num_modalities=self.num_modalities, horizon=self.horizon,
        )

    def minibatches(self, size: int, rng: np.random.Generator | None = None) -> Iterator["EventBatch"]:
        order = np.arange(self.num_cases) if rng is None else rng.permutation(self.num_cases)
        for s in range(0, self.num_cases, size):
            yield self.subset(order[s:s + size])

    def with_labels(self, labels: np.ndarray) -> "EventBatch":
        b = self.subset(np.arange(self.num_cases))
        b.labels = np.asarray(labels, dtype=np.int64).copy()
        return b


def batches_equal(a: EventBatch, b: EventBatch) -> bool:
    """Structural equality; labels of unlabeled cases are ignored."""
    if a.num_modalities != b.num_modalities or a.horizon != b.horizon:
        return False
    for x, y in ((a.case_ids, b.case_ids), (a.times, b.times), (a.modality, b.modality),
                 (a.case_index, b.case_index), (a.feature_row, b.feature_row),
                 (a.label_mask, b.label_mask), (a.availability, b.availability)):
        if x.shape != y.shape or not np.array_equal(x, y):
            return False
    if not np.array_equal(a.labels[a.label_mask], b.labels[b.label_mask]):
        return False
    return all(f.shape == g.shape and np.array_equal(f, g) for f, g in zip(a.features, b.features))


# ---------------------------------------------------------------------------
# dataset files (newline-delimited JSON, one event per line)
# ---------------------------------------------------------------------------

def write_dataset(batch: EventBatch, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    seen: set[int] = set()
    with path.open("w", encoding="utf-8") as fh:
        for k in range(batch.num_events):
            c = int(batch.case_index[k])
            rec = {
                "case_id": int(batch.case_ids[c]),
                "modality": int(batch.modality[k]),
                "timestamp": float(batch.times[k]),
                "features": [float(v) for v in batch.content(k)],
            }
            if c not in seen:
                seen.add(c)
                observed = bool(batch.label_mask[c])
                if observed:
                    rec["label"] = int(batch.labels[c])
                rec["label_observed"] = int(observed)
            fh.write(json.dumps(rec) + "\n")


def ingest(path: str | Path, num_modalities: int, horizon: float = DEFAULT_HORIZON,
           on_duplicate: str = "keep-last") -> EventBatch:
    """Read a dataset file into an :class:`EventBatch`.

    Problems are collected with their line numbers and raised together as an
    :class:`IngestError`. Duplicate ``(case, modality, timestamp)`` records keep
    the last occurrence unless ``on_duplicate="error"``.
    """
    if on_duplicate not in ("keep-last", "error"):
        raise ValueError(f"on_duplicate must be 'keep-last' or 'error', not {on_duplicate!r}")
    problems: list[str] = []
    events: dict[tuple[int, int, float], ClinicalEvent] = {}
    labels: dict[int, tuple[int, bool]] = {}
    dims: dict[int, int] = {}
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                case = int(rec["case_id"])
                if "modality" not in rec and "timestamp" not in rec and "features" not in rec:
                    # label-only header record
                    observed = bool(int(rec.get("label_observed", 0)))
                    entry = (int(rec["label"]) if observed else 0, observed)
                    if labels.setdefault(case, entry) != entry:
                        problems.append(f"line {lineno}: label fields for case {case} disagree")
                    continue
                mod = int(rec["modality"])
                t = float(rec["timestamp"])
                feats = np.asarray(rec["features"], dtype=np.float64)
            except (ValueError, KeyError, TypeError) as exc:
                problems.append(f"line {lineno}: malformed record ({exc})")
                continue
            if not 0 <= mod < num_modalities:
                problems.append(f"line {lineno}: unknown modality id {mod}")
                continue
            if not 0.0 <= t <= horizon:
                problems.append(f"line {lineno}: timestamp {t} outside [0, {horizon}]")
                continue
            if feats.ndim != 1:
                problems.append(f"line {lineno}: features must be a flat array")
                continue
            if dims.setdefault(mod, len(feats)) != len(feats):
                problems.append(f"line {lineno}: modality {mod} has {len(feats)} features, "
                                f"expected {dims[mod]}")
                continue
            if "label_observed" in rec or "label" in rec:
                observed = bool(int(rec.get("label_observed", 1 if "label" in rec else 0)))
                lab = int(rec["label"]) if rec.get("label") is not None else 0
                if observed and lab not in (0, 1):
                    problems.append(f"line {lineno}: label must be 0 or 1")
                    continue
                entry = (lab if observed else 0, observed)
                if case in labels and labels[case] != entry:
                    problems.append(f"line {lineno}: label fields for case {case} disagree "
                                    f"with its first record")
                    continue
                labels.setdefault(case, entry)
            elif case not in labels:
                problems.append(f"line {lineno}: first record of case {case} lacks label fields")
                continue
            key = (case, mod, t)
            if key in events and on_duplicate == "error":
                problems.append(f"line {lineno}: duplicate event {key}")
                continue
            events[key] = ClinicalEvent(feats, t, mod, case)
    if problems:
        raise IngestError(problems)
    feature_dims = [dims.get(m, 0) for m in range(num_modalities)]
    with_events = {e.case_id for e in events.values()}
    empty = sorted(set(labels) - with_events)
    if empty:
        raise IngestError([f"case {c} has no events" for c in empty])
    return EventBatch.from_events(events.values(), labels, num_modalities, horizon, feature_dims)


# ---------------------------------------------------------------------------
# point clouds
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class PointCloud:
    """Token matrix ``tokens`` (N, d) with one coordinate row per token.

    ``observed[k]`` is False for tokens standing in for a missing modality
    (placeholders emitted by sampling). ``times``, ``modality`` and ``case``
    never change through an attention layer; only the content does.
    """

    tokens: Tensor
    times: np.ndarray
    modality: np.ndarray
    case: np.ndarray
    observed: np.ndarray
    num_cases: int
    num_modalities: int

    def __post_init__(self) -> None:
        n = self.tokens.shape[0]
        for name in ("times", "modality", "case", "observed"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"PointCloud: {name} has {len(getattr(self, name))} rows, tokens have {n}")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    @cached_property
    def index(self) -> dict[tuple[int, int], np.ndarray]:
        """(case, modality) -> token positions in time order."""
        order = np.lexsort((self.times, self.modality, self.case))
        keys = self.case[order] * self.num_modalities + self.modality[order]
        bounds = np.flatnonzero(np.diff(keys)) + 1
        out: dict[tuple[int, int], np.ndarray] = {}
        for grp in np.split(order, bounds):
            if len(grp):
                out[(int(self.case[grp[0]]), int(self.modality[grp[0]]))] = grp
        return out

    def positions(self, case: int, modality: int) -> np.ndarray:
        return self.index.get((case, modality), np.zeros(0, dtype=np.int64))

    def with_tokens(self, tokens: Tensor) -> "PointCloud":
        return PointCloud(tokens, self.times, self.modality, self.case, self.observed,
                          self.num_cases, self.num_modalities)

    def subcloud(self, positions: np.ndarray) -> "PointCloud":
        return PointCloud(ops.take(self.tokens, positions), self.times[positions],
                          self.modality[positions], self.case[positions], self.observed[positions],
                          self.num_cases, self.num_modalities)


def slice_cloud(cloud: PointCloud, case: int, modality: int, availability: np.ndarray | None = None) -> Tensor:
    """Time-ordered tokens of one (case, modality); empty when the modality is
    missing for that case."""
    if availability is not None and not availability[case, modality]:
        return Tensor(np.zeros((0, cloud.dim)))
    pos = cloud.positions(case, modality)
    if availability is None:
        pos = pos[cloud.observed[pos]]
    return ops.take(cloud.tokens, pos)


class ModalityEncoder:
    """Per-modality two-layer perceptrons mapping raw content to width ``d``."""

    def __init__(self, store: ParamStore, feature_dims: Sequence[int], d: int,
                 activation: str = "gelu", name: str = "encoder"):
        self.feature_dims = list(feature_dims)
        self.d = d
        self.mlps = [MLP(store, f"{name}.m{m}", fd, d, d, activation) for m, fd in enumerate(feature_dims)]


def encode(batch: EventBatch, encoder: ModalityEncoder) -> PointCloud:
    """One token per event, in event order, coordinates copied from the batch."""
    if len(encoder.mlps) != batch.num_modalities:
        raise ValueError(f"encoder covers {len(encoder.mlps)} modalities, batch has {batch.num_modalities}")
    parts, order = [], []
    for m, mlp in enumerate(encoder.mlps):
        sel = np.flatnonzero(batch.modality == m)
        if not len(sel):
            continue
        x = batch.features[m][batch.feature_row[sel]]
        if x.shape[1] != encoder.feature_dims[m]:
            raise ValueError(f"modality {m}: content dim {x.shape[1]} != encoder input dim "
                             f"{encoder.feature_dims[m]}")
        parts.append(mlp(Tensor(x)))
        order.append(sel)
    stacked = ops.concat(parts, axis=0)
    inverse = np.empty(batch.num_events, dtype=np.int64)
    inverse[np.concatenate(order)] = np.arange(batch.num_events)
    tokens = ops.take(stacked, inverse)
    return PointCloud(tokens, batch.times.copy(), batch.modality.copy(), batch.case_index.copy(),
                      np.ones(batch.num_events, dtype=bool), batch.num_cases, batch.num_modalities)
