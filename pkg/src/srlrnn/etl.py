"""Admission trajectories: the JSONL interchange format and preprocessing for raw extracts.

One admission per line::

    {"id": "adm-0001",
     "static": {"age": 63.0, "gender": 1.0, ...},
     "diseases": [3, 17],
     "units": [{"t": 0, "obs": [..], "meds": [0, 4], "reward": 0.0}, ...],
     "survived": true}

``units`` are 24-hour steps in order; ``meds`` and ``diseases`` are integer
vocabulary ids. The final unit carries the survival reward (+15 / -15).

Raw extracts arrive as a directory of four UTF-8 CSV files:

``admissions.csv``
    ``admission_id, died, length_hours`` plus any number of numeric static
    columns (``age`` is required). ``died`` is 0/1; ``length_hours`` may be
    empty, in which case the last event closes the admission.
``measurements.csv``
    ``admission_id, hours, variable, value``; ``hours`` counts from admission.
``medications.csv``
    ``admission_id, hours, code``
``diagnoses.csv``
    ``admission_id, code``

Preprocessing bins events into 24-hour units (averaging repeated
measurements), drops minors and admissions missing too many variables,
keeps the most frequent medication and diagnosis codes, and fills the
remaining gaps by k-nearest-neighbour imputation over unit rows.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from sklearn.impute import KNNImputer

from .nets import Batch

SURVIVAL_REWARD = 15.0
DEATH_REWARD = -15.0


class DataError(ValueError):
    """Malformed input data."""


@dataclass
class Trajectory:
    id: str
    static: Dict[str, float]
    diseases: List[int]
    obs: np.ndarray          # (T, n_ts)
    meds: List[List[int]]    # per unit, medication ids
    rewards: np.ndarray      # (T,)
    survived: bool

    def __post_init__(self):
        self.obs = np.asarray(self.obs, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if self.obs.ndim != 2 or len(self.meds) != len(self.obs) or len(self.rewards) != len(self.obs):
            raise DataError(f"{self.id}: obs/meds/rewards lengths disagree")

    @property
    def length(self) -> int:
        return len(self.obs)

    def action_matrix(self, n_meds: int) -> np.ndarray:
        out = np.zeros((self.length, n_meds))
        for t, ids in enumerate(self.meds):
            if ids:
                if max(ids) >= n_meds or min(ids) < 0:
                    raise DataError(f"{self.id}: medication id outside 0..{n_meds - 1}")
                out[t, ids] = 1.0
        return out

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "static": {k: float(v) for k, v in self.static.items()},
            "diseases": [int(d) for d in self.diseases],
            "units": [
                {"t": t, "obs": [float(v) for v in self.obs[t]], "meds": [int(m) for m in self.meds[t]],
                 "reward": float(self.rewards[t])}
                for t in range(self.length)
            ],
            "survived": bool(self.survived),
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "Trajectory":
        units = doc["units"]
        if not units:
            raise DataError(f"{doc.get('id')}: admission has no units")
        return cls(
            id=str(doc["id"]),
            static={k: float(v) for k, v in doc["static"].items()},
            diseases=[int(d) for d in doc["diseases"]],
            obs=np.array([u["obs"] for u in units], dtype=np.float64),
            meds=[sorted(int(m) for m in u["meds"]) for u in units],
            rewards=np.array([u["reward"] for u in units], dtype=np.float64),
            survived=bool(doc["survived"]),
        )


def write_jsonl(trajectories: Iterable[Trajectory], path) -> None:
    """Write admissions one per line (atomic rename from a ``.partial`` file)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    with tmp.open("w", encoding="utf-8") as fh:
        for traj in trajectories:
            # json uses repr() for floats: 17 significant digits, exact round trip
            fh.write(json.dumps(traj.to_json(), separators=(",", ":")) + "\n")
    tmp.replace(path)


def read_jsonl(path) -> List[Trajectory]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(Trajectory.from_json(json.loads(line)))
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    if not out:
        raise DataError(f"{path}: no admissions")
    return out


@dataclass
class CohortInfo:
    n_meds: int
    n_diseases: int
    n_ts: int
    static_names: tuple

    @classmethod
    def infer(cls, trajectories: Sequence[Trajectory], n_meds=None, n_diseases=None) -> "CohortInfo":
        first = trajectories[0]
        max_med = max((max(ids) for t in trajectories for ids in t.meds if ids), default=-1)
        max_dis = max((max(t.diseases) for t in trajectories if t.diseases), default=-1)
        return cls(
            n_meds=int(n_meds if n_meds is not None else max_med + 1),
            n_diseases=int(n_diseases if n_diseases is not None else max_dis + 1),
            n_ts=first.obs.shape[1],
            static_names=tuple(first.static),
        )


def to_batch(trajectories: Sequence[Trajectory], info: CohortInfo) -> Batch:
    """Pad admissions into a :class:`~srlrnn.nets.Batch`."""
    if not trajectories:
        raise DataError("cannot batch zero admissions")
    B = len(trajectories)
    T = max(t.length for t in trajectories)
    K = info.n_meds
    ts = np.zeros((B, T, info.n_ts))
    static = np.zeros((B, len(info.static_names)))
    diseases = np.zeros((B, info.n_diseases))
    actions = np.zeros((B, T, K))
    rewards = np.zeros((B, T))
    mask = np.zeros((B, T), dtype=bool)
    for i, traj in enumerate(trajectories):
        if traj.obs.shape[1] != info.n_ts:
            raise DataError(f"{traj.id}: {traj.obs.shape[1]} time-series variables, expected {info.n_ts}")
        if tuple(traj.static) != info.static_names:
            raise DataError(f"{traj.id}: static fields {tuple(traj.static)} != {info.static_names}")
        L = traj.length
        ts[i, :L] = traj.obs
        static[i] = list(traj.static.values())
        if traj.diseases:
            if max(traj.diseases) >= info.n_diseases:
                raise DataError(f"{traj.id}: disease id outside 0..{info.n_diseases - 1}")
            diseases[i, traj.diseases] = 1.0
        actions[i, :L] = traj.action_matrix(K)
        rewards[i, :L] = traj.rewards
        mask[i, :L] = True
    return Batch(ts, static, diseases, actions, rewards, mask)


@dataclass
class Standardizer:
    """Z-scores time-series and static inputs with statistics from a training batch."""

    ts_mean: np.ndarray
    ts_std: np.ndarray
    static_mean: np.ndarray
    static_std: np.ndarray

    @classmethod
    def fit(cls, batch: Batch) -> "Standardizer":
        rows = batch.ts[batch.mask]
        return cls(rows.mean(axis=0), _safe_std(rows), batch.static.mean(axis=0), _safe_std(batch.static))

    def transform(self, batch: Batch) -> Batch:
        ts = np.where(batch.mask[:, :, None], (batch.ts - self.ts_mean) / self.ts_std, 0.0)
        static = (batch.static - self.static_mean) / self.static_std
        return Batch(ts, static, batch.diseases, batch.actions, batch.rewards, batch.mask)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("ts_mean", "ts_std", "static_mean", "static_std")}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Standardizer":
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})


def _safe_std(x: np.ndarray) -> np.ndarray:
    s = x.std(axis=0)
    return np.where(s > 1e-12, s, 1.0)


# ----------------------------------------------------------------------------
# raw extracts
# ----------------------------------------------------------------------------


@dataclass
class RawRecord:
    id: str
    static: Dict[str, float]
    measurements: List[Tuple[float, str, float]]   # (hours, variable, value)
    medications: List[Tuple[float, str]]           # (hours, code)
    diagnoses: List[str]
    died: bool
    length_hours: Optional[float] = None

    def __post_init__(self):
        self.measurements = sorted(self.measurements, key=lambda m: m[0])
        self.medications = sorted(self.medications, key=lambda m: m[0])


def _read_csv(path: Path, required: Sequence[str]) -> List[dict]:
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            missing = [c for c in required if c not in (reader.fieldnames or [])]
            if missing:
                raise DataError(f"{path}: missing columns {missing}")
            return [dict(row, _line=n) for n, row in enumerate(reader, 2)]
    except FileNotFoundError as exc:
        raise DataError(f"{path}: not found") from exc


def _num(row: dict, key: str, path: Path) -> float:
    try:
        v = float(row[key])
    except (TypeError, ValueError) as exc:
        raise DataError(f"{path}:{row['_line']}: {key}={row[key]!r} is not a number") from exc
    if not math.isfinite(v):
        raise DataError(f"{path}:{row['_line']}: {key} is not finite")
    return v


def read_extract(directory) -> List[RawRecord]:
    """Load the four-file CSV extract described in the module docstring."""
    d = Path(directory)
    adm_path, m_path, rx_path, dx_path = (d / f for f in
                                          ("admissions.csv", "measurements.csv", "medications.csv", "diagnoses.csv"))
    admissions = _read_csv(adm_path, ("admission_id", "died", "length_hours", "age"))
    records: Dict[str, RawRecord] = {}
    for row in admissions:
        aid = row["admission_id"]
        if aid in records:
            raise DataError(f"{adm_path}:{row['_line']}: duplicate admission {aid!r}")
        static = {k: _num(row, k, adm_path) for k in row
                  if k not in ("admission_id", "died", "length_hours", "_line")}
        length = _num(row, "length_hours", adm_path) if row["length_hours"].strip() else None
        records[aid] = RawRecord(aid, static, [], [], [], bool(_num(row, "died", adm_path)), length)

    def owner(row, path):
        rec = records.get(row["admission_id"])
        if rec is None:
            raise DataError(f"{path}:{row['_line']}: unknown admission {row['admission_id']!r}")
        return rec

    for row in _read_csv(m_path, ("admission_id", "hours", "variable", "value")):
        owner(row, m_path).measurements.append((_num(row, "hours", m_path), row["variable"], _num(row, "value", m_path)))
    for row in _read_csv(rx_path, ("admission_id", "hours", "code")):
        owner(row, rx_path).medications.append((_num(row, "hours", rx_path), row["code"]))
    for row in _read_csv(dx_path, ("admission_id", "code")):
        owner(row, dx_path).diagnoses.append(row["code"])
    out = []
    for rec in records.values():
        out.append(RawRecord(rec.id, rec.static, rec.measurements, rec.medications, rec.diagnoses,
                             rec.died, rec.length_hours))
    return out


# ----------------------------------------------------------------------------
# binning
# ----------------------------------------------------------------------------


@dataclass
class UnitSeries:
    """One admission on a regular grid of time units.

    ``values`` is (U, V) with NaN where a unit has no measurement of a
    variable, ``counts`` the number of raw points averaged into each cell.
    """

    id: str
    static: Dict[str, float]
    variables: Tuple[str, ...]
    values: np.ndarray
    counts: np.ndarray
    meds: List[List[str]]
    diagnoses: List[str]
    died: bool

    @property
    def n_units(self) -> int:
        return len(self.values)

    @property
    def missing_variables(self) -> int:
        """Variables never measured during the admission."""
        return int(np.sum(self.counts.sum(axis=0) == 0))


def bin_to_units(raw: RawRecord, variables: Optional[Sequence[str]] = None, unit_hours: float = 24.0) -> UnitSeries:
    """Average measurements falling in the same ``unit_hours`` window.

    Unit ``u`` covers ``[u * unit_hours, (u + 1) * unit_hours)``; an event
    exactly at the end of the admission joins the last unit. Events outside
    ``[0, length]`` are dropped. The admission spans
    ``ceil(length / unit_hours)`` units (at least one).
    """
    if unit_hours <= 0:
        raise ValueError("unit_hours must be positive")
    if not raw.measurements:
        raise DataError(f"{raw.id}: no measurements")
    variables = tuple(sorted({m[1] for m in raw.measurements})) if variables is None else tuple(variables)
    col = {v: j for j, v in enumerate(variables)}
    last = max([m[0] for m in raw.measurements] + [m[0] for m in raw.medications])
    length = raw.length_hours if raw.length_hours is not None else last
    n_units = max(1, math.ceil(length / unit_hours))

    def unit(h: float) -> Optional[int]:
        if h < 0 or h > length:
            return None
        return min(int(h // unit_hours), n_units - 1)

    sums = np.zeros((n_units, len(variables)))
    counts = np.zeros((n_units, len(variables)), dtype=int)
    for h, name, value in raw.measurements:
        u = unit(h)
        if u is None or name not in col:
            continue
        sums[u, col[name]] += value
        counts[u, col[name]] += 1
    meds: List[set] = [set() for _ in range(n_units)]
    for h, code in raw.medications:
        u = unit(h)
        if u is not None:
            meds[u].add(code)
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return UnitSeries(raw.id, dict(raw.static), variables, values, counts, [sorted(m) for m in meds],
                      sorted(set(raw.diagnoses)), raw.died)


# ----------------------------------------------------------------------------
# imputation, filtering, vocabularies
# ----------------------------------------------------------------------------


def impute_knn(matrix: np.ndarray, k: int = 10, names: Optional[Sequence[str]] = None) -> np.ndarray:
    """Fill NaNs with the mean of the ``k`` nearest rows that observe the variable.

    Columns are z-scored with their observed mean and standard deviation
    before distances are taken; the distance between two rows is the
    Euclidean distance over the variables both observe, rescaled by
    ``sqrt(n_variables / n_shared)`` (scikit-learn's ``nan_euclidean``).
    A gap in a row that shares no observed variable with any donor gets the
    column's observed mean. Observed entries are returned unchanged.
    """
    X = np.array(matrix, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("expected a 2-d matrix")
    if k < 1:
        raise ValueError("k must be at least 1")
    missing = np.isnan(X)
    if not missing.any():
        return X
    names = list(names) if names is not None else [f"column {j}" for j in range(X.shape[1])]
    for j in np.flatnonzero(missing.all(axis=0)):
        raise DataError(f"variable {names[j]!r} is never observed")
    empty = np.flatnonzero(missing.all(axis=1))
    if empty.size:
        raise DataError(f"row {empty[0]} has no observed value")
    mean = np.nanmean(X, axis=0)
    std = np.nanstd(X, axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    Z = (X - mean) / std
    filled = KNNImputer(n_neighbors=k).fit_transform(Z) * std + mean
    return np.where(missing, filled, X)


@dataclass
class ExclusionReport:
    retained: int = 0
    excluded: Dict[str, int] = field(default_factory=dict)
    rows: List[Tuple[str, str]] = field(default_factory=list)   # (admission id, reason)

    def add(self, admission_id: str, reason: str) -> None:
        self.excluded[reason] = self.excluded.get(reason, 0) + 1
        self.rows.append((admission_id, reason))

    def write_csv(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".partial")
        with tmp.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["admission_id", "reason"])
            w.writerows(self.rows)
        tmp.replace(path)


AGE_REASON = "age_below_minimum"
MISSING_REASON = "too_many_missing_variables"


def filter_cohort(admissions: Sequence, min_age: float = 18.0, max_missing: int = 10):
    """Keep adults with at most ``max_missing`` never-measured variables.

    Both bounds are inclusive (age 18 and 10 missing variables are kept).
    Age is checked first, so each excluded admission has one reason.
    Works on :class:`UnitSeries` and on :class:`Trajectory` (which has no
    missing variables). Returns ``(kept, ExclusionReport)``.
    """
    report = ExclusionReport()
    kept = []
    for adm in admissions:
        if "age" not in adm.static:
            raise DataError(f"{adm.id}: no age field")
        n_missing = getattr(adm, "missing_variables", 0)
        if adm.static["age"] < min_age:
            report.add(adm.id, AGE_REASON)
        elif n_missing > max_missing:
            report.add(adm.id, MISSING_REASON)
        else:
            kept.append(adm)
    report.retained = len(kept)
    return kept, report


def rank_codes(counts: Mapping, top: int) -> list:
    """The ``top`` most frequent codes, by descending count then ascending code."""
    if top < 1:
        raise ValueError("vocabulary size must be at least 1")
    return sorted(counts, key=lambda c: (-counts[c], c))[:top]


def apply_code_map(admissions: Sequence[UnitSeries], mapping: Mapping[str, str]) -> List[UnitSeries]:
    """Replace medication codes by their category; unmapped codes pass through."""
    out = []
    for adm in admissions:
        meds = [sorted({mapping.get(c, c) for c in unit}) for unit in adm.meds]
        out.append(UnitSeries(adm.id, adm.static, adm.variables, adm.values, adm.counts, meds,
                              adm.diagnoses, adm.died))
    return out


def read_code_map(path) -> Dict[str, str]:
    """Two-column CSV ``code,category``."""
    rows = _read_csv(Path(path), ("code", "category"))
    return {r["code"]: r["category"] for r in rows}


@dataclass
class Vocabulary:
    medications: list
    diseases: list

    def med_ids(self) -> dict:
        return {c: i for i, c in enumerate(self.medications)}

    def disease_ids(self) -> dict:
        return {c: i for i, c in enumerate(self.diseases)}


def truncate_vocab(admissions: Sequence[UnitSeries], top_meds: int, top_diseases: int):
    """Keep the most frequent medication and diagnosis codes.

    Medications are counted once per unit in which they are given,
    diagnoses once per admission. Ids follow descending frequency with a
    lexicographic tie-break. Returns ``(Vocabulary, admissions)`` where the
    admissions' codes are replaced by integer ids and dropped codes removed.
    """
    med_counts = Counter(c for adm in admissions for unit in adm.meds for c in unit)
    dx_counts = Counter(c for adm in admissions for c in set(adm.diagnoses))
    vocab = Vocabulary(rank_codes(med_counts, top_meds), rank_codes(dx_counts, top_diseases))
    mid, did = vocab.med_ids(), vocab.disease_ids()
    out = []
    for adm in admissions:
        meds = [sorted(mid[c] for c in unit if c in mid) for unit in adm.meds]
        dx = sorted(did[c] for c in adm.diagnoses if c in did)
        out.append(UnitSeries(adm.id, adm.static, adm.variables, adm.values, adm.counts, meds, dx, adm.died))
    return vocab, out


def restrict_vocab(trajectories: Sequence[Trajectory], top_meds: int, top_diseases: int) -> List[Trajectory]:
    """Vocabulary truncation for already-encoded admissions.

    Ids are left alone when the data already fits in ``top_meds`` /
    ``top_diseases`` ids; otherwise they are re-ranked as in
    :func:`truncate_vocab`. Either way a second call is a no-op.
    """
    info = CohortInfo.infer(trajectories)
    remap_meds = info.n_meds > top_meds
    remap_dx = info.n_diseases > top_diseases
    if not (remap_meds or remap_dx):
        return list(trajectories)
    med_counts = Counter(c for t in trajectories for unit in t.meds for c in unit)
    dx_counts = Counter(c for t in trajectories for c in set(t.diseases))
    mid = {c: i for i, c in enumerate(rank_codes(med_counts, top_meds))} if remap_meds else None
    did = {c: i for i, c in enumerate(rank_codes(dx_counts, top_diseases))} if remap_dx else None
    out = []
    for t in trajectories:
        meds = [sorted(mid[c] for c in unit if c in mid) for unit in t.meds] if mid else t.meds
        dx = sorted(did[c] for c in t.diseases if c in did) if did else t.diseases
        out.append(Trajectory(t.id, t.static, dx, t.obs, meds, t.rewards, t.survived))
    return out


# ----------------------------------------------------------------------------
# pipeline
# ----------------------------------------------------------------------------


@dataclass
class PreprocessSettings:
    unit_hours: float = 24.0
    min_age: float = 18.0
    max_missing: int = 10
    top_meds: int = 1000
    top_diseases: int = 2000
    knn: int = 10


def _carry_forward(values: np.ndarray) -> np.ndarray:
    """Units with no measurement at all copy the nearest earlier (else later) unit."""
    values = values.copy()
    empty = np.isnan(values).all(axis=1)
    if empty.all():
        return values
    seen = np.flatnonzero(~empty)
    for u in np.flatnonzero(empty):
        before = seen[seen < u]
        values[u] = values[before[-1]] if before.size else values[seen[0]]
    return values


def admissions_to_trajectories(admissions: Sequence[UnitSeries], knn: int = 10) -> List[Trajectory]:
    """Impute over all unit rows jointly and attach terminal rewards."""
    if not admissions:
        raise DataError("no admissions left to process")
    variables = admissions[0].variables
    blocks = [_carry_forward(a.values) for a in admissions]
    filled = impute_knn(np.vstack(blocks), knn, variables)
    out, start = [], 0
    for adm, block in zip(admissions, blocks):
        obs = filled[start:start + len(block)]
        start += len(block)
        rewards = np.zeros(len(obs))
        rewards[-1] = DEATH_REWARD if adm.died else SURVIVAL_REWARD
        out.append(Trajectory(adm.id, adm.static, list(adm.diagnoses), obs, adm.meds, rewards, not adm.died))
    return out


def preprocess_records(records: Sequence[RawRecord], settings: PreprocessSettings = PreprocessSettings(),
                       code_map: Optional[Mapping[str, str]] = None):
    """Raw extract to trajectories; returns ``(trajectories, Vocabulary, variables, ExclusionReport)``."""
    if not records:
        raise DataError("extract contains no admissions")
    variables = tuple(sorted({m[1] for r in records for m in r.measurements}))
    binned, report_empty = [], []
    for r in records:
        if not r.measurements:
            report_empty.append(r.id)
            continue
        binned.append(bin_to_units(r, variables, settings.unit_hours))
    kept, report = filter_cohort(binned, settings.min_age, settings.max_missing)
    for aid in report_empty:
        report.add(aid, "no_measurements")
    if code_map:
        kept = apply_code_map(kept, code_map)
    vocab, coded = truncate_vocab(kept, settings.top_meds, settings.top_diseases)
    return admissions_to_trajectories(coded, settings.knn), vocab, variables, report


def preprocess_trajectories(trajectories: Sequence[Trajectory], settings: PreprocessSettings = PreprocessSettings()):
    """The same pipeline on already-processed admissions (filter and vocabulary only).

    Processed admissions have no gaps, so binning and imputation have
    nothing to do; running this on its own output is a no-op.
    Returns ``(trajectories, ExclusionReport)``.
    """
    for t in trajectories:
        if not np.all(np.isfinite(t.obs)):
            raise DataError(f"{t.id}: processed admissions must not contain missing values")
    kept, report = filter_cohort(trajectories, settings.min_age, settings.max_missing)
    return restrict_vocab(kept, settings.top_meds, settings.top_diseases), report
