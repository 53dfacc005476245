"""Long-format event-history records and the validated dataset built from them.

Status codes follow the usual long-format convention: ``0`` marks censoring,
``1..K`` mark recurrent event types and ``K + 1`` marks the terminal event.
Each subject contributes exactly one end-of-follow-up row (status ``0`` or
``K + 1``) whose time is the observed follow-up ``U = min(D, C)``.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Hashable, Iterable, Sequence
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np


class ValidationError(ValueError):
    """Raised when event records violate the long-format conventions."""

    def __init__(self, message: str, subject_id: Hashable | None = None):
        self.subject_id = subject_id
        if subject_id is not None:
            message = f"subject {subject_id!r}: {message}"
        super().__init__(message)


class DuplicateEndRecordError(ValidationError):
    pass


class MissingEndRecordError(ValidationError):
    pass


class RecurrentAfterFollowUpError(ValidationError):
    pass


class InconsistentCovariatesError(ValidationError):
    pass


class InconsistentClusterError(ValidationError):
    pass


class NegativeTimeError(ValidationError):
    pass


class ZeroFollowUpError(ValidationError):
    pass


class InvalidStatusError(ValidationError):
    pass


@dataclass(frozen=True)
class EventRecord:
    """One row of long-format data."""

    subject_id: Hashable
    time: float
    status: int
    covariates: tuple[float, ...]
    cluster_id: Hashable | None = None


@dataclass(frozen=True)
class SubjectData:
    """Observed history of one subject.

    ``recurrent_times[k]`` holds the sorted event times of type ``k + 1``.
    """

    id: Hashable
    cluster: Hashable | None
    Z: tuple[float, ...]
    U: float
    delta: int
    recurrent_times: tuple[tuple[float, ...], ...]

    @property
    def terminal(self) -> bool:
        return self.delta == 1


@dataclass(frozen=True)
class WeightScheme:
    """Nonnegative weights for the recurrent types and the terminal event."""

    w_recur: tuple[float, ...]
    w_term: float

    def __post_init__(self):
        object.__setattr__(self, "w_recur", tuple(float(w) for w in self.w_recur))
        object.__setattr__(self, "w_term", float(self.w_term))
        ws = (*self.w_recur, self.w_term)
        if any(not math.isfinite(w) or w < 0 for w in ws):
            raise ValueError("weights must be finite and nonnegative")
        if not any(w > 0 for w in ws):
            raise ValueError("at least one weight must be strictly positive")

    @property
    def K(self) -> int:
        return len(self.w_recur)

    def __add__(self, other: WeightScheme) -> WeightScheme:
        if self.K != other.K:
            raise ValueError("weight schemes have different numbers of types")
        return WeightScheme(
            tuple(a + b for a, b in zip(self.w_recur, other.w_recur)),
            self.w_term + other.w_term,
        )


@dataclass(frozen=True, eq=False)
class EventDataset:
    """Validated, immutable collection of subject histories.

    Internally stored as flat arrays: per-subject ``Z``, ``U``, ``delta`` and
    cluster codes, plus one entry per recurrent event (subject index, type in
    ``1..K`` and time).  Subjects are kept in order of first appearance.
    """

    ids: tuple
    Z: np.ndarray
    U: np.ndarray
    delta: np.ndarray
    event_subject: np.ndarray
    event_type: np.ndarray
    event_time: np.ndarray
    K: int
    covariate_names: tuple[str, ...]
    clusters: tuple | None = None
    _index: dict = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("Z", "U", "delta", "event_subject", "event_type", "event_time"):
            arr = np.array(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "_index", {sid: i for i, sid in enumerate(self.ids)})

    # construction -----------------------------------------------------------

    @classmethod
    def from_arrays(
        cls,
        Z,
        U,
        delta,
        event_subject=(),
        event_type=(),
        event_time=(),
        *,
        ids: Sequence | None = None,
        clusters: Sequence | None = None,
        K: int | None = None,
        covariate_names: Sequence[str] | None = None,
    ) -> EventDataset:
        """Build a dataset from arrays, applying the same checks as ingest."""
        Z = np.asarray(Z, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
        U = np.asarray(U, dtype=float)
        delta = np.asarray(delta, dtype=int)
        n = U.shape[0]
        if n == 0:
            raise ValidationError("dataset has no subjects")
        if Z.shape[0] != n or delta.shape[0] != n:
            raise ValidationError("Z, U and delta have different lengths")
        es = np.asarray(event_subject, dtype=np.intp)
        et = np.asarray(event_type, dtype=int)
        tt = np.asarray(event_time, dtype=float)
        ids = tuple(range(n)) if ids is None else tuple(ids)
        if len(set(ids)) != n:
            raise ValidationError("subject ids are not unique")
        if K is None:
            K = int(et.max()) if et.size else 0
        names = (
            tuple(f"Z{j + 1}" for j in range(Z.shape[1]))
            if covariate_names is None
            else tuple(covariate_names)
        )
        if len(names) != Z.shape[1]:
            raise ValidationError("covariate_names length does not match Z")
        if not np.all(np.isfinite(Z)):
            raise ValidationError("covariates must be finite")

        def bad(mask, exc, msg):
            if np.any(mask):
                raise exc(msg, ids[int(np.flatnonzero(mask)[0])])

        bad(~np.isfinite(U) | (U < 0), NegativeTimeError, "negative or non-finite time")
        bad(U == 0, ZeroFollowUpError, "zero follow-up time")
        bad((delta != 0) & (delta != 1), InvalidStatusError, "delta must be 0 or 1")
        if tt.size:
            if np.any(~np.isfinite(tt) | (tt < 0)):
                raise NegativeTimeError("negative or non-finite time", ids[int(es[np.argmax(~np.isfinite(tt) | (tt < 0))])])
            if np.any((et < 1) | (et > K)):
                raise InvalidStatusError("recurrent type outside 1..K", ids[int(es[np.argmax((et < 1) | (et > K))])])
            late = tt > U[es]
            if np.any(late):
                raise RecurrentAfterFollowUpError(
                    "recurrent time exceeds follow-up", ids[int(es[np.argmax(late)])]
                )
        order = np.lexsort((tt, et, es))
        return cls(
            ids=ids,
            Z=Z,
            U=U,
            delta=delta,
            event_subject=es[order],
            event_type=et[order],
            event_time=tt[order],
            K=int(K),
            covariate_names=names,
            clusters=None if clusters is None else tuple(clusters),
        )

    # basic properties -------------------------------------------------------

    @property
    def n(self) -> int:
        return self.U.shape[0]

    @property
    def p(self) -> int:
        return self.Z.shape[1]

    @property
    def cluster_mode(self) -> bool:
        return self.clusters is not None

    @cached_property
    def cluster_codes(self) -> np.ndarray:
        """Integer cluster index per subject (subject index when not clustered).

        Codes follow order of first appearance.
        """
        if self.clusters is None:
            return np.arange(self.n)
        codes: dict = {}
        return np.array([codes.setdefault(c, len(codes)) for c in self.clusters])

    @property
    def n_units(self) -> int:
        """Number of independent sampling units (clusters or subjects)."""
        return int(self.cluster_codes.max()) + 1

    @cached_property
    def subjects(self) -> tuple[SubjectData, ...]:
        out = []
        starts = np.searchsorted(self.event_subject, np.arange(self.n + 1))
        for i in range(self.n):
            lo, hi = starts[i], starts[i + 1]
            types, times = self.event_type[lo:hi], self.event_time[lo:hi]
            rec = tuple(
                tuple(float(x) for x in times[types == k]) for k in range(1, self.K + 1)
            )
            out.append(
                SubjectData(
                    id=self.ids[i],
                    cluster=None if self.clusters is None else self.clusters[i],
                    Z=tuple(float(z) for z in self.Z[i]),
                    U=float(self.U[i]),
                    delta=int(self.delta[i]),
                    recurrent_times=rec,
                )
            )
        return tuple(out)

    def subject(self, subject_id) -> SubjectData:
        return self.subjects[self._index[subject_id]]

    def column(self, name: str) -> np.ndarray:
        """Covariate column by name."""
        try:
            return self.Z[:, self.covariate_names.index(name)]
        except ValueError:
            raise KeyError(f"unknown covariate {name!r}") from None

    def subset(self, idx) -> EventDataset:
        """Dataset restricted to the subjects at positions ``idx``."""
        idx = np.asarray(idx, dtype=np.intp)
        remap = np.full(self.n, -1, dtype=np.intp)
        remap[idx] = np.arange(idx.size)
        keep = remap[self.event_subject] >= 0
        return EventDataset.from_arrays(
            self.Z[idx],
            self.U[idx],
            self.delta[idx],
            remap[self.event_subject[keep]],
            self.event_type[keep],
            self.event_time[keep],
            ids=[self.ids[i] for i in idx],
            clusters=None if self.clusters is None else [self.clusters[i] for i in idx],
            K=self.K,
            covariate_names=self.covariate_names,
        )

    def with_covariates(self, names: Sequence[str], intercept: bool = False) -> EventDataset:
        """Copy with the design restricted to ``names`` (optionally a leading 1)."""
        cols = [self.column(nm) for nm in names]
        if intercept:
            cols.insert(0, np.ones(self.n))
        Z = np.column_stack(cols) if cols else np.empty((self.n, 0))
        return EventDataset(
            ids=self.ids,
            Z=Z,
            U=self.U,
            delta=self.delta,
            event_subject=self.event_subject,
            event_type=self.event_type,
            event_time=self.event_time,
            K=self.K,
            covariate_names=(("(Intercept)",) if intercept else ()) + tuple(names),
            clusters=self.clusters,
        )

    def __eq__(self, other):
        if not isinstance(other, EventDataset):
            return NotImplemented
        return (
            self.ids == other.ids
            and self.K == other.K
            and self.covariate_names == other.covariate_names
            and self.clusters == other.clusters
            and all(
                np.array_equal(getattr(self, a), getattr(other, a))
                for a in ("Z", "U", "delta", "event_subject", "event_type", "event_time")
            )
        )

    __hash__ = None

    # loss process -----------------------------------------------------------

    def loss_matrix(self, weights: WeightScheme, times) -> np.ndarray:
        """Weighted cumulative loss ``L(t)`` for every subject and time.

        Returns an ``(n, len(times))`` array.
        """
        times = np.atleast_1d(np.asarray(times, dtype=float))
        _check_weights(weights, self.K)
        w = np.asarray(weights.w_recur, dtype=float)
        out = np.zeros((self.n, times.size))
        if self.event_time.size:
            ew = w[self.event_type - 1]
            # an event at time s counts at every t >= s
            col = np.searchsorted(times, self.event_time, side="left")
            hit = (col < times.size) & (ew != 0)
            np.add.at(out, (self.event_subject[hit], col[hit]), ew[hit])
        if weights.w_term:
            dead = np.flatnonzero(self.delta == 1)
            col = np.searchsorted(times, self.U[dead], side="left")
            hit = col < times.size
            np.add.at(out, (dead[hit], col[hit]), weights.w_term)
        return np.cumsum(out, axis=1) if _is_sorted(times) else _unsorted_loss(self, weights, times)


def _is_sorted(x: np.ndarray) -> bool:
    return bool(np.all(np.diff(x) >= 0))


def _unsorted_loss(data: EventDataset, weights: WeightScheme, times: np.ndarray) -> np.ndarray:
    order = np.argsort(times, kind="stable")
    out = np.empty((data.n, times.size))
    out[:, order] = data.loss_matrix(weights, times[order])
    return out


def _check_weights(weights: WeightScheme, K: int) -> None:
    if weights.K != K:
        raise ValueError(f"weight scheme has {weights.K} recurrent weights, data have K={K}")


def cumulative_loss(subject: SubjectData, weights: WeightScheme, t: float) -> float:
    """Weighted count of events up to ``min(U, t)`` for one subject."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    _check_weights(weights, len(subject.recurrent_times))
    horizon = min(subject.U, t)
    total = 0.0
    for w, times in zip(weights.w_recur, subject.recurrent_times):
        if w:
            total += w * sum(1 for s in times if s <= horizon)
    if subject.delta == 1 and subject.U <= t:
        total += weights.w_term
    return total


# ingest / export ------------------------------------------------------------


def ingest_long(
    records: Iterable[EventRecord],
    K: int | None = None,
    covariate_names: Sequence[str] | None = None,
) -> EventDataset:
    """Validate long-format rows and assemble an :class:`EventDataset`.

    Parameters
    ----------
    records : iterable of EventRecord
        Rows in any order.
    K : int, optional
        Number of recurrent types.  When omitted the largest status code in
        the data is taken to be the terminal code, so ``K = max(status) - 1``.
        Pass ``K`` explicitly when no subject in the data has died.
    covariate_names : sequence of str, optional
        Names for the covariate columns (default ``Z1, Z2, ...``).
    """
    records = list(records)
    if not records:
        raise ValidationError("no records supplied")
    p = len(records[0].covariates)
    if K is None:
        K = max(int(r.status) for r in records) - 1
        K = max(K, 0)
    order: dict = {}
    rows: dict = {}
    for r in records:
        if len(r.covariates) != p:
            raise InconsistentCovariatesError("covariate vector length differs", r.subject_id)
        order.setdefault(r.subject_id, len(order))
        rows.setdefault(r.subject_id, []).append(r)

    clustered = any(r.cluster_id is not None for r in records)
    n = len(order)
    Z = np.empty((n, p))
    U = np.empty(n)
    delta = np.empty(n, dtype=int)
    clusters = [None] * n
    es, et, tt = [], [], []
    for sid, i in order.items():
        rs = rows[sid]
        z0, c0 = tuple(rs[0].covariates), rs[0].cluster_id
        end = None
        for r in rs:
            t = float(r.time)
            if not math.isfinite(t) or t < 0:
                raise NegativeTimeError("negative or non-finite time", sid)
            if tuple(r.covariates) != z0:
                raise InconsistentCovariatesError("covariates differ between rows", sid)
            if r.cluster_id != c0:
                raise InconsistentClusterError("cluster id differs between rows", sid)
            s = int(r.status)
            if s < 0 or s > K + 1:
                raise InvalidStatusError(f"status {s} outside 0..{K + 1}", sid)
            if s in (0, K + 1):
                if end is not None:
                    raise DuplicateEndRecordError("more than one end-of-follow-up record", sid)
                end = (t, int(s == K + 1))
            else:
                es.append(i)
                et.append(s)
                tt.append(t)
        if end is None:
            raise MissingEndRecordError("no end-of-follow-up record", sid)
        if clustered and c0 is None:
            raise InconsistentClusterError("missing cluster id in clustered data", sid)
        Z[i], clusters[i] = z0, c0
        U[i], delta[i] = end
    return EventDataset.from_arrays(
        Z,
        U,
        delta,
        es,
        et,
        tt,
        ids=list(order),
        clusters=clusters if clustered else None,
        K=K,
        covariate_names=covariate_names,
    )


def to_records(data: EventDataset) -> list[EventRecord]:
    """Long-format rows for a dataset (recurrent rows first, then the end row)."""
    out = []
    for s in data.subjects:
        for k, times in enumerate(s.recurrent_times, start=1):
            out.extend(EventRecord(s.id, t, k, s.Z, s.cluster) for t in times)
        out.append(EventRecord(s.id, s.U, data.K + 1 if s.delta else 0, s.Z, s.cluster))
    return out


def read_csv(path: str | Path, K: int | None = None) -> EventDataset:
    """Read ``id,[cluster,]time,status,<covariates...>`` long-format CSV."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        required = {"id", "time", "status"}
        if not required <= set(header):
            raise ValidationError(f"{path}: header must contain id, time, status")
        pos = {h: j for j, h in enumerate(header)}
        cov_names = [h for h in header if h not in ("id", "cluster", "time", "status")]
        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rec = EventRecord(
                    subject_id=row[pos["id"]].strip(),
                    time=float(row[pos["time"]]),
                    status=int(row[pos["status"]]),
                    covariates=tuple(float(row[pos[c]]) for c in cov_names),
                    cluster_id=row[pos["cluster"]].strip() if "cluster" in pos else None,
                )
            except (ValueError, IndexError) as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            records.append(rec)
    return ingest_long(records, K=K, covariate_names=cov_names)


def write_csv(data: EventDataset, path: str | Path) -> None:
    """Write a dataset in the long CSV format read by :func:`read_csv`."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        head = ["id"] + (["cluster"] if data.cluster_mode else []) + ["time", "status"]
        w.writerow(head + list(data.covariate_names))
        for r in to_records(data):
            row = [r.subject_id] + ([r.cluster_id] if data.cluster_mode else [])
            w.writerow(row + [repr(float(r.time)), r.status] + [repr(float(z)) for z in r.covariates])
