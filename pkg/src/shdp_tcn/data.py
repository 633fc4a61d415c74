"""Demand records, monthly topic-heat series, windowing and synthetic data."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

CATEGORIES = {
    10000: "Manufacturing",
    10001: "Agriculture, forestry and fishery",
    10002: "Biomedical industry",
    10003: "Scientific Services",
    10004: "Electronic Information Industry",
    10005: "Water and environment industry",
    10006: "Education",
    10007: "New Materials and Energy",
    10008: "Light industry and petrochemical",
    10009: "Construction industry",
}

DEFAULT_START = "2012-01"
DEFAULT_END = "2021-06"
DEFAULT_CUTOFF = "2019-06"


class DataError(ValueError):
    """Malformed or insufficient input data."""


class WindowError(DataError):
    """The series cannot yield the requested windows."""

    def __init__(self, message: str, max_window: Optional[int] = None):
        super().__init__(message)
        self.max_window = max_window


class MissingEmbeddingError(KeyError):
    pass


# --- calendar months ("YYYY-MM") ---------------------------------------------

def month_index(month: str) -> int:
    try:
        year, mon = month.split("-")
        y, m = int(year), int(mon)
    except (ValueError, AttributeError):
        raise DataError(f"invalid month {month!r}, expected YYYY-MM") from None
    if not 1 <= m <= 12 or len(year) != 4:
        raise DataError(f"invalid month {month!r}, expected YYYY-MM")
    return y * 12 + (m - 1)


def month_from_index(idx: int) -> str:
    y, m = divmod(idx, 12)
    return f"{y:04d}-{m + 1:02d}"


def add_months(month: str, n: int) -> str:
    return month_from_index(month_index(month) + n)


def month_range(start: str, end: str) -> list[str]:
    a, b = month_index(start), month_index(end)
    if b < a:
        raise DataError(f"empty month range {start}..{end}")
    return [month_from_index(i) for i in range(a, b + 1)]


# --- records -----------------------------------------------------------------

@dataclass(frozen=True)
class DemandRecord:
    month: str
    category_id: int
    topic_words: tuple

    def __post_init__(self):
        month_index(self.month)


def read_records_csv(path) -> list[DemandRecord]:
    """Parse ``month,category_id,topic_words`` rows (``|``-separated words).

    Every malformed row is collected and reported together; unknown category
    ids only produce a warning.
    """
    records, bad = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expected = ["month", "category_id", "topic_words"]
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != expected:
            raise DataError(f"{path}: header must be {','.join(expected)}, got {reader.fieldnames}")
        for row in reader:
            line = reader.line_num
            try:
                words = tuple(w.strip() for w in (row["topic_words"] or "").split("|") if w.strip())
                rec = DemandRecord(row["month"].strip(), int(row["category_id"]), words)
            except (DataError, ValueError, TypeError, AttributeError):
                bad.append(line)
                continue
            records.append(rec)
    if bad:
        raise DataError(f"{path}: malformed rows at lines {', '.join(map(str, bad))}")
    unknown = sorted({r.category_id for r in records} - set(CATEGORIES))
    if unknown:
        log.warning("unknown category ids: %s", ", ".join(map(str, unknown)))
    return records


def category_summary(records: Iterable[DemandRecord]) -> list[tuple[int, int, str]]:
    """(category id, record count, category name) rows, sorted by id."""
    counts = Counter(r.category_id for r in records)
    return [(cid, n, CATEGORIES.get(cid, "Unknown")) for cid, n in sorted(counts.items())]


# --- heat series -------------------------------------------------------------

@dataclass
class HeatSeries:
    topic: str
    start_month: str
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        month_index(self.start_month)

    def __len__(self) -> int:
        return len(self.values)

    @property
    def months(self) -> list[str]:
        base = month_index(self.start_month)
        return [month_from_index(base + i) for i in range(len(self.values))]

    @property
    def end_month(self) -> str:
        return add_months(self.start_month, len(self.values) - 1)


def compute_heat_series(records: Iterable[DemandRecord], topic: str,
                        start: str, end: str) -> HeatSeries:
    """Count, per month, the records whose topic words contain ``topic``.

    Months without matching records get 0. A record counts once no matter
    how often the word repeats inside it; duplicate records count twice.
    """
    months = month_range(start, end)
    base = month_index(start)
    values = np.zeros(len(months))
    for r in records:
        i = month_index(r.month) - base
        if 0 <= i < len(months) and topic in r.topic_words:
            values[i] += 1
    return HeatSeries(topic, start, values)


def dominant_topic(records: Iterable[DemandRecord], month: str) -> Optional[str]:
    """Most frequent topic word in ``month`` (ties: lexicographically
    smallest); ``None`` when the month has no records."""
    counts = Counter()
    seen = False
    for r in records:
        if r.month == month:
            seen = True
            counts.update(set(r.topic_words))
    if not seen or not counts:
        return None
    best = max(counts.values())
    return min(w for w, n in counts.items() if n == best)


def dominant_topics_from_series(series: Sequence[HeatSeries]) -> dict[str, Optional[str]]:
    """Per-month hottest topic across several series on the same calendar.

    A month where every series is zero maps to ``None``.
    """
    if not series:
        return {}
    months = series[0].months
    for s in series[1:]:
        if s.months != months:
            raise DataError("series must share the same month range")
    mat = np.stack([s.values for s in series])
    out = {}
    for j, month in enumerate(months):
        col = mat[:, j]
        best = col.max()
        out[month] = None if best <= 0 else min(s.topic for s, v in zip(series, col) if v == best)
    return out


def write_series_csv(series: HeatSeries, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["month", "value"])
        for m, v in zip(series.months, series.values):
            w.writerow([m, repr(float(v))])


def read_series_csv(path, topic: Optional[str] = None) -> HeatSeries:
    """Read a ``month,value`` CSV; months must be consecutive."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["month", "value"]:
            raise DataError(f"{path}: header must be month,value")
        rows = [(r["month"].strip(), float(r["value"])) for r in reader]
    if not rows:
        raise DataError(f"{path}: no data rows")
    base = month_index(rows[0][0])
    for i, (m, _) in enumerate(rows):
        if month_index(m) != base + i:
            raise DataError(f"{path}: month {m} breaks the consecutive month sequence")
    return HeatSeries(topic or Path(path).stem, rows[0][0], [v for _, v in rows])


# --- topic features ----------------------------------------------------------

@dataclass
class TopicFeature:
    topic: str
    vector: np.ndarray


def load_embeddings(path) -> dict[str, np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise DataError(f"{path}: embeddings file must map topic -> list of floats")
    out = {k: np.asarray(v, dtype=np.float64) for k, v in doc.items()}
    dims = {v.shape for v in out.values()}
    if len(dims) > 1:
        raise DataError(f"{path}: embeddings have inconsistent dimensions {sorted(dims)}")
    return out


def stub_embedding(topic: str, dim: int, seed: int = 0) -> np.ndarray:
    """Deterministic stand-in vector in [-1, 1]^dim keyed by a hash of ``topic``."""
    digest = hashlib.blake2b(f"{seed}:{topic}".encode("utf-8"), digest_size=16).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    return rng.uniform(-1.0, 1.0, size=dim)


def topic_feature_lookup(topic: str, dim: int,
                         embeddings: Optional[Mapping[str, np.ndarray]] = None,
                         allow_stub: bool = True, seed: int = 0) -> TopicFeature:
    if embeddings is not None and topic in embeddings:
        vec = np.asarray(embeddings[topic], dtype=np.float64)
        if vec.shape != (dim,):
            raise DataError(f"embedding for {topic!r} has length {vec.size}, expected {dim}")
        return TopicFeature(topic, vec.copy())
    if embeddings is not None and not allow_stub:
        raise MissingEmbeddingError(topic)
    return TopicFeature(topic, stub_embedding(topic, dim, seed))


def monthly_topic_features(dominant: Mapping[str, Optional[str]], dim: int,
                           embeddings: Optional[Mapping[str, np.ndarray]] = None,
                           allow_stub: bool = True) -> dict[str, np.ndarray]:
    """Month -> feature vector of that month's dominant topic (zeros when the
    month has no data)."""
    return {
        m: np.zeros(dim) if t is None else topic_feature_lookup(t, dim, embeddings, allow_stub).vector
        for m, t in dominant.items()
    }


# --- normalisation and windows -------------------------------------------------

@dataclass(frozen=True)
class Normalizer:
    """Affine map ``(v - offset) / scale`` fitted by min-max to [0, 1].

    A constant fit sample gets ``scale = 1`` and ``offset = c - 0.5`` so the
    constant lands on 0.5 without dividing by zero.
    """

    offset: float
    scale: float

    @classmethod
    def fit(cls, values) -> "Normalizer":
        v = np.asarray(values, dtype=np.float64)
        lo, hi = float(v.min()), float(v.max())
        if hi == lo:
            return cls(lo - 0.5, 1.0)
        return cls(lo, hi - lo)

    def transform(self, values):
        return (np.asarray(values, dtype=np.float64) - self.offset) / self.scale

    def inverse(self, values):
        return np.asarray(values, dtype=np.float64) * self.scale + self.offset

    def to_dict(self) -> dict:
        return {"offset": self.offset, "scale": self.scale}

    @classmethod
    def from_dict(cls, doc: dict) -> "Normalizer":
        return cls(float(doc["offset"]), float(doc["scale"]))


@dataclass
class WindowSample:
    heat_window: np.ndarray
    topic_feature: np.ndarray
    target: float
    target_month: str
    seasonal_value: Optional[float] = None  # normalised heat 12 months before the target


@dataclass(frozen=True)
class SplitSpec:
    cutoff_month: str = DEFAULT_CUTOFF


class Windows(NamedTuple):
    train: list
    test: list
    normalizer: Normalizer
    trend_epsilon: float


def max_feasible_window(series: HeatSeries, split: SplitSpec) -> int:
    """Largest window that still leaves one training target at or before the
    cutoff."""
    return month_index(split.cutoff_month) - month_index(series.start_month)


def make_windows(series: HeatSeries, window_len: int, split: SplitSpec = SplitSpec(),
                 topic_dim: int = 0,
                 topic_features: Optional[Mapping[str, np.ndarray]] = None,
                 trend_fraction: float = 0.05) -> Windows:
    """Stride-1 sliding windows split chronologically at the cutoff month.

    The normaliser is fitted on the values the training samples can see
    (windows and targets up to the cutoff) and applied to both splits. Each
    sample carries the topic feature of its last window month. The trend
    threshold is ``trend_fraction`` times the standard deviation of the
    normalised training values.
    """
    n = len(series.values)
    if window_len < 1:
        raise WindowError("window_len must be >= 1")
    if n < window_len + 1:
        raise WindowError(
            f"series has {n} months; window_len {window_len} needs at least {window_len + 1}",
            max_window=max(n - 1, 0),
        )
    cut = month_index(split.cutoff_month) - month_index(series.start_month)
    if cut < window_len:
        max_w = max_feasible_window(series, split)
        raise WindowError(
            f"window_len {window_len} leaves no training target at or before "
            f"{split.cutoff_month}; the maximum feasible window_len is {max_w}",
            max_window=max_w,
        )
    if topic_dim > 0 and topic_features is None:
        raise DataError("topic_dim > 0 needs per-month topic features")

    fit_values = series.values[: min(cut, n - 1) + 1]
    norm = Normalizer.fit(fit_values)
    z = norm.transform(series.values)
    months = series.months
    train, test = [], []
    for t in range(window_len, n):
        last = months[t - 1]
        feat = np.zeros(0) if topic_dim == 0 else np.asarray(topic_features.get(last, np.zeros(topic_dim)), dtype=np.float64)
        if feat.shape != (topic_dim,):
            raise DataError(f"topic feature for {last} has length {feat.size}, expected {topic_dim}")
        sample = WindowSample(
            heat_window=z[t - window_len : t].copy(),
            topic_feature=feat,
            target=float(z[t]),
            target_month=months[t],
            seasonal_value=float(z[t - 12]) if t >= 12 else None,
        )
        (train if t <= cut else test).append(sample)
    eps = trend_fraction * float(np.std(norm.transform(fit_values)))
    return Windows(train, test, norm, eps)


# --- synthetic data ----------------------------------------------------------

def _as_range(v) -> tuple[float, float]:
    if isinstance(v, (int, float)):
        return float(v), float(v)
    lo, hi = v
    return float(lo), float(hi)


@dataclass
class SyntheticSpec:
    """Per-topic process ``max(0, round(base + slope*t + amp*sin(2*pi*t/12) + noise))``.

    ``base``, ``slope`` and ``amplitude`` are scalars or ``[lo, hi]`` ranges
    drawn uniformly per topic; ``noise`` is the Gaussian standard deviation.
    """

    months: int = 114
    start_month: str = DEFAULT_START
    n_topics: int = 5
    base: object = (20.0, 60.0)
    slope: object = (-0.2, 0.4)
    amplitude: object = (2.0, 10.0)
    noise: float = 2.0
    seed: int = 0
    topic_prefix: str = "topic"

    @classmethod
    def from_dict(cls, doc: dict) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(doc) - known)
        if unknown:
            raise DataError(f"unknown synthetic spec fields: {unknown}")
        spec = cls(**doc)
        if spec.months < 1 or spec.n_topics < 0 or spec.noise < 0:
            raise DataError("synthetic spec needs months >= 1, n_topics >= 0, noise >= 0")
        month_index(spec.start_month)
        return spec


@dataclass
class SyntheticSeries:
    series: HeatSeries
    base: float
    slope: float
    amplitude: float
    noise: np.ndarray = field(repr=False)

    def components(self) -> dict:
        t = np.arange(len(self.series.values))
        return {
            "topic": self.series.topic,
            "base": self.base,
            "slope": self.slope,
            "amplitude": self.amplitude,
            "trend": (self.base + self.slope * t).tolist(),
            "seasonal": (self.amplitude * _season(t)).tolist(),
            "noise": self.noise.tolist(),
        }


def _season(t: np.ndarray) -> np.ndarray:
    # phase reduced mod 12 so the seasonal term repeats exactly in floating point
    return np.sin(2 * np.pi * (t % 12) / 12)


def generate_synthetic(spec: SyntheticSpec) -> list[SyntheticSeries]:
    rng = np.random.default_rng(spec.seed)
    t = np.arange(spec.months)
    width = max(2, len(str(max(spec.n_topics - 1, 0))))
    out = []
    for i in range(spec.n_topics):
        base = rng.uniform(*_as_range(spec.base))
        slope = rng.uniform(*_as_range(spec.slope))
        amp = rng.uniform(*_as_range(spec.amplitude))
        noise = rng.normal(0.0, spec.noise, size=spec.months) if spec.noise > 0 else np.zeros(spec.months)
        values = np.maximum(0.0, np.round(base + slope * t + amp * _season(t) + noise))
        series = HeatSeries(f"{spec.topic_prefix}-{i:0{width}d}", spec.start_month, values)
        out.append(SyntheticSeries(series, base, slope, amp, noise))
    return out


def generate_ar_series(months: int = 114, coefficients: Mapping[int, float] = None,
                       initial: Optional[Sequence[float]] = None,
                       start_month: str = DEFAULT_START, topic: str = "ar") -> HeatSeries:
    """Noise-free autoregression ``v_t = sum_lag coef * v_{t-lag}``.

    The first ``max(lag)`` values come from ``initial`` (default: a 12-month
    seasonal profile ``10 + 5 sin(2 pi t / 12)``).
    """
    coefficients = {1: 0.8, 12: 0.2} if coefficients is None else dict(coefficients)
    p = max(coefficients)
    if initial is None:
        initial = [10.0 + 5.0 * np.sin(2 * np.pi * t / 12) for t in range(p)]
    v = list(map(float, initial))
    if len(v) < p:
        raise DataError(f"need {p} initial values, got {len(v)}")
    while len(v) < months:
        v.append(sum(c * v[-lag] for lag, c in coefficients.items()))
    return HeatSeries(topic, start_month, v[:months])
