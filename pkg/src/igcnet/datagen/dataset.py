"""Trajectories, datasets, CAPO queries and their JSON-lines / CSV forms."""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np


def _as_steps(v, T: int) -> np.ndarray:
    """``v`` as a (T, d) float array; 1-d input becomes one column."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 2:
        if v.shape[0] != T:
            raise ValueError(f"expected {T} steps, got {v.shape[0]}")
        return v
    if v.ndim == 1 and v.size == T:
        return v.reshape(T, 1)
    if v.size == 0:
        return np.zeros((T, 0))
    return v.reshape(T, -1)


@dataclass
class Trajectory:
    """One unit: outcomes ``Y`` (T, d_y), covariates ``X`` (T, d_x), binary
    treatments ``A`` (T, d_a).  ``A[t]`` is assigned after observing
    ``Y[t]`` and ``X[t]`` and acts on ``Y[t+1]`` onward."""

    id: int
    Y: np.ndarray
    X: np.ndarray
    A: np.ndarray
    static: np.ndarray = field(default_factory=lambda: np.zeros(0))
    true_propensities: Optional[np.ndarray] = None
    U: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.Y = _as_steps(self.Y, len(self.Y))
        T = self.Y.shape[0]
        self.X = _as_steps(self.X, T)
        self.A = _as_steps(self.A, T)
        self.static = np.asarray(self.static, dtype=np.float64).reshape(-1)
        if self.true_propensities is not None:
            self.true_propensities = _as_steps(self.true_propensities, T)
        if not np.all((self.A == 0) | (self.A == 1)):
            raise ValueError(f"trajectory {self.id}: treatments must be binary")

    @property
    def T(self) -> int:
        return self.Y.shape[0]

    def prefix(self, t: int) -> "Trajectory":
        """History up to and including step ``t`` (treatments through ``t-1`` matter)."""
        return Trajectory(
            id=self.id,
            Y=self.Y[: t + 1],
            X=self.X[: t + 1],
            A=self.A[: t + 1],
            static=self.static,
            true_propensities=None if self.true_propensities is None else self.true_propensities[: t + 1],
            U=self.U,
            extra=dict(self.extra),
        )

    def to_record(self) -> dict:
        rec = {
            "id": int(self.id),
            "T": int(self.T),
            "Y": self.Y.tolist(),
            "X": self.X.tolist(),
            "A": self.A.astype(int).tolist(),
            "static": self.static.tolist(),
            "true_propensities": None if self.true_propensities is None else self.true_propensities.tolist(),
            "U": None if self.U is None else float(self.U),
        }
        if self.extra:
            rec["extra"] = {k: np.asarray(v).tolist() for k, v in self.extra.items()}
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Trajectory":
        T = int(rec["T"])
        X = np.asarray(rec.get("X") or [[] for _ in range(T)], dtype=np.float64).reshape(T, -1)
        traj = cls(
            id=rec["id"],
            Y=np.asarray(rec["Y"], dtype=np.float64).reshape(T, -1),
            X=X,
            A=np.asarray(rec["A"], dtype=np.float64).reshape(T, -1),
            static=np.asarray(rec.get("static") or [], dtype=np.float64),
            true_propensities=None if rec.get("true_propensities") is None
            else np.asarray(rec["true_propensities"], dtype=np.float64).reshape(T, -1),
            U=rec.get("U"),
            extra={k: np.asarray(v) for k, v in (rec.get("extra") or {}).items()},
        )
        return traj


@dataclass
class Dataset:
    trajectories: list
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.trajectories)

    def __getitem__(self, i) -> Trajectory:
        return self.trajectories[i]

    def __iter__(self):
        return iter(self.trajectories)

    @property
    def d_y(self) -> int:
        return self.trajectories[0].Y.shape[1]

    @property
    def d_x(self) -> int:
        return self.trajectories[0].X.shape[1]

    @property
    def d_a(self) -> int:
        return self.trajectories[0].A.shape[1]

    @property
    def d_static(self) -> int:
        return self.trajectories[0].static.shape[0]

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset([self.trajectories[i] for i in indices], dict(self.meta))

    def split(self, fractions: Sequence[float]) -> list:
        """Contiguous split by fractions (trajectories are already i.i.d.)."""
        n = len(self)
        cuts = np.round(np.cumsum([0.0] + list(fractions)) / sum(fractions) * n).astype(int)
        return [self.subset(range(cuts[i], cuts[i + 1])) for i in range(len(fractions))]

    def by_id(self) -> dict:
        return {tr.id: tr for tr in self.trajectories}


@dataclass
class CapoQuery:
    """Observed history cut at ``t`` plus an interventional sequence ``a_seq`` (tau, d_a)."""

    trajectory_id: int
    t: int
    a_seq: np.ndarray
    oracle: Optional[np.ndarray] = None
    oracle_se: Optional[float] = None
    oracle_method: Optional[str] = None

    def __post_init__(self):
        self.a_seq = np.asarray(self.a_seq, dtype=np.float64)
        if self.a_seq.ndim == 1:
            self.a_seq = self.a_seq[:, None]
        if self.oracle is not None:
            self.oracle = np.atleast_1d(np.asarray(self.oracle, dtype=np.float64))

    @property
    def tau(self) -> int:
        return self.a_seq.shape[0]

    def to_record(self) -> dict:
        return {
            "trajectory_id": int(self.trajectory_id),
            "t": int(self.t),
            "a_seq": self.a_seq.astype(int).tolist(),
            "oracle": None if self.oracle is None else self.oracle.tolist(),
            "oracle_se": None if self.oracle_se is None else float(self.oracle_se),
            "oracle_method": self.oracle_method,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "CapoQuery":
        return cls(
            trajectory_id=rec["trajectory_id"],
            t=rec["t"],
            a_seq=np.asarray(rec["a_seq"], dtype=np.float64),
            oracle=rec.get("oracle"),
            oracle_se=rec.get("oracle_se"),
            oracle_method=rec.get("oracle_method"),
        )


# -- hashing and files ------------------------------------------------------

def config_hash(obj) -> str:
    """Stable short hash of a JSON-serializable config."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_atomic(path: Path, text: str) -> None:
    """Write via ``<path>.partial`` and rename; a crash leaves only the marker file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    tmp.write_text(text)
    tmp.replace(path)


def _dump_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)


def dataset_to_jsonl(ds: Dataset) -> str:
    lines = [_dump_line({"_meta": ds.meta})]
    lines += [_dump_line(tr.to_record()) for tr in ds.trajectories]
    return "\n".join(lines) + "\n"


def save_dataset(ds: Dataset, path) -> None:
    write_atomic(Path(path), dataset_to_jsonl(ds))


def load_dataset(path) -> Dataset:
    meta, trajs = {}, []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if "_meta" in rec:
                meta = rec["_meta"]
            else:
                trajs.append(Trajectory.from_record(rec))
    return Dataset(trajs, meta)


def queries_to_jsonl(queries: Sequence[CapoQuery], meta: Optional[dict] = None) -> str:
    lines = [_dump_line({"_meta": meta or {}})]
    lines += [_dump_line(q.to_record()) for q in queries]
    return "\n".join(lines) + "\n"


def save_queries(queries: Sequence[CapoQuery], path, meta: Optional[dict] = None) -> None:
    write_atomic(Path(path), queries_to_jsonl(queries, meta))


def load_queries(path) -> tuple:
    """Returns ``(queries, meta)``."""
    meta, out = {}, []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if "_meta" in rec:
                meta = rec["_meta"]
            else:
                out.append(CapoQuery.from_record(rec))
    return out, meta


def dataset_to_csv(ds: Dataset) -> str:
    """One row per (trajectory, step) with vector fields flattened into columns."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    d_y, d_x, d_a, d_s = ds.d_y, ds.d_x, ds.d_a, ds.d_static
    header = ["id", "T", "t"] + [f"Y{j}" for j in range(d_y)] + [f"X{j}" for j in range(d_x)]
    header += [f"A{j}" for j in range(d_a)] + [f"p{j}" for j in range(d_a)]
    header += [f"static{j}" for j in range(d_s)] + ["U"]
    w.writerow(header)
    for tr in ds:
        props = tr.true_propensities if tr.true_propensities is not None else np.full((tr.T, d_a), np.nan)
        for t in range(tr.T):
            row = [tr.id, tr.T, t] + [repr(float(v)) for v in tr.Y[t]] + [repr(float(v)) for v in tr.X[t]]
            row += [int(v) for v in tr.A[t]] + ["" if np.isnan(v) else repr(float(v)) for v in props[t]]
            row += [repr(float(v)) for v in tr.static] + ["" if tr.U is None else repr(float(tr.U))]
            w.writerow(row)
    return buf.getvalue()
