"""Order book ingestion: snapshot CSV, 45-column feature files, depth polling.

A book snapshot is ten ask levels and ten bid levels, best price first, each
level a (price, volume) pair. The canonical 40-column order used everywhere
in this package is

    ask_p1, ask_v1, ..., ask_p10, ask_v10, bid_p1, bid_v1, ..., bid_p10, bid_v10

Snapshot CSV rows carry a leading epoch-millisecond timestamp followed by
those 40 values. Timestamps must sit on a regular sampling grid (default
five minutes); missing grid slots are flagged and later filled by
last-value-forward imputation (or, behind a flag, neighbor averaging, which
tends to distort level dynamics and is never the default).

The 45-column format is sample-major: 40 features in the order above plus
five trend labels for horizons 1, 2, 3, 5, 10. Native label codes are
1/2/3 and are re-coded to +1/0/-1 here. Files shipped feature-major (one
row per feature) must be transposed first, e.g.
``python -c "import numpy; numpy.savetxt(out, numpy.loadtxt(inp).T, delimiter=',')"``.
"""

from __future__ import annotations

import io
import json
import urllib.request
from dataclasses import dataclass, field

import numpy as np

LEVELS = 10
SNAPSHOT_COLUMNS = 1 + 4 * LEVELS
FI2010_COLUMNS = 45
FI2010_HORIZONS = (1, 2, 3, 5, 10)
# native code -> trend class
FI2010_LABEL_MAP = {1: 1, 2: 0, 3: -1}


class IngestError(ValueError):
    """Malformed or invariant-violating input; carries the 0-based row."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class DepthFeedError(IngestError):
    """Depth endpoint unreachable or returned an unusable document."""


@dataclass(frozen=True)
class LobSnapshot:
    """One timestamped 10-level ask/bid frame (40 values)."""

    timestamp: int
    asks: tuple  # ((price, volume), ...) best ask first, ascending prices
    bids: tuple  # ((price, volume), ...) best bid first, descending prices

    def validate(self):
        if len(self.asks) != LEVELS or len(self.bids) != LEVELS:
            raise ValueError(f"expected {LEVELS} levels per side, got "
                             f"{len(self.asks)} asks / {len(self.bids)} bids")
        for side, pairs in (("ask", self.asks), ("bid", self.bids)):
            for price, volume in pairs:
                if not (np.isfinite(price) and np.isfinite(volume)):
                    raise ValueError(f"non-finite {side} level")
                if price <= 0:
                    raise ValueError(f"non-positive {side} price {price}")
                if volume < 0:
                    raise ValueError(f"negative {side} volume {volume}")
        ask_prices = [p for p, _ in self.asks]
        bid_prices = [p for p, _ in self.bids]
        if any(nxt <= cur for cur, nxt in zip(ask_prices, ask_prices[1:])):
            raise ValueError("ask prices not strictly ascending")
        if any(nxt >= cur for cur, nxt in zip(bid_prices, bid_prices[1:])):
            raise ValueError("bid prices not strictly descending")
        if self.bids[0][0] >= self.asks[0][0]:
            raise ValueError(f"crossed book: best bid {self.bids[0][0]} >= "
                             f"best ask {self.asks[0][0]}")
        return self

    def to_row(self):
        """Flatten to the canonical 40-value column order."""
        out = []
        for price, volume in self.asks:
            out += [price, volume]
        for price, volume in self.bids:
            out += [price, volume]
        return out

    @classmethod
    def from_row(cls, timestamp, values):
        if len(values) != 4 * LEVELS:
            raise ValueError(f"expected {4 * LEVELS} values, got {len(values)}")
        asks = tuple((values[2 * i], values[2 * i + 1]) for i in range(LEVELS))
        bids = tuple((values[2 * LEVELS + 2 * i], values[2 * LEVELS + 2 * i + 1])
                     for i in range(LEVELS))
        return cls(int(timestamp), asks, bids)


@dataclass
class LobSeries:
    """Grid-regular snapshot series; None entries are flagged gaps."""

    snapshots: list
    resolution: int = 300  # seconds between grid slots
    missing_mask: list = field(default_factory=list)

    def __post_init__(self):
        if not self.missing_mask:
            self.missing_mask = [s is None for s in self.snapshots]

    def __len__(self):
        return len(self.snapshots)

    @property
    def n_missing(self):
        return sum(self.missing_mask)

    def timestamps(self):
        if not self.snapshots:
            return np.zeros(0, dtype=np.int64)
        idx0, first = next((i, s) for i, s in enumerate(self.snapshots) if s is not None)
        step = self.resolution * 1000
        t0 = first.timestamp - idx0 * step
        return t0 + step * np.arange(len(self.snapshots), dtype=np.int64)

    def features(self):
        """(N, 40) float64 matrix in canonical column order; gaps are NaN."""
        out = np.full((len(self.snapshots), 4 * LEVELS), np.nan)
        for i, snap in enumerate(self.snapshots):
            if snap is not None:
                out[i] = snap.to_row()
        return out


@dataclass
class FeatureMatrix:
    """Sample-major 40-feature rows plus per-horizon labels in {-1, 0, +1}."""

    features: np.ndarray  # (N, 40) float64
    labels: np.ndarray    # (N, 5) int8, columns follow FI2010_HORIZONS

    def label_column(self, k):
        try:
            return self.labels[:, FI2010_HORIZONS.index(k)]
        except ValueError:
            raise KeyError(f"no label column for horizon {k}; have {FI2010_HORIZONS}") from None


def _text_lines(stream):
    if isinstance(stream, (str, bytes)):
        raise TypeError("pass a file object or iterable of lines, not a path/str")
    if hasattr(stream, "read") and isinstance(stream.read(0), bytes):
        stream = io.TextIOWrapper(stream, encoding="utf-8")
    return stream


def _parse_cells(line, row, expected):
    cells = line.rstrip("\r\n").split(",")
    if len(cells) != expected:
        raise IngestError(f"expected {expected} columns, got {len(cells)}", row=row)
    try:
        return [float(c) for c in cells]
    except ValueError as exc:
        raise IngestError(f"non-numeric cell ({exc})", row=row) from None


def _looks_like_header(line):
    first = line.split(",", 1)[0].strip()
    try:
        float(first)
        return False
    except ValueError:
        return True


def parse_snapshot_csv(stream, resolution=300):
    """Parse timestamped 41-column snapshot rows into a validated LobSeries.

    Rows must be chronological and grid-aligned; interior gaps become
    flagged missing slots. Any invariant violation raises IngestError with
    the offending row index.
    """
    snapshots = []
    prev_ts = None
    step = resolution * 1000
    for row, line in enumerate(_text_lines(stream)):
        if not line.strip():
            continue
        if row == 0 and _looks_like_header(line):
            continue
        values = _parse_cells(line, row, SNAPSHOT_COLUMNS)
        ts = values[0]
        if ts != int(ts):
            raise IngestError(f"non-integer timestamp {ts}", row=row)
        snap = LobSnapshot.from_row(ts, values[1:])
        try:
            snap.validate()
        except ValueError as exc:
            raise IngestError(str(exc), row=row) from None
        if prev_ts is not None:
            if snap.timestamp <= prev_ts:
                raise IngestError(f"non-monotone timestamp {snap.timestamp} after {prev_ts}", row=row)
            gap = snap.timestamp - prev_ts
            if gap % step:
                raise IngestError(f"timestamp {snap.timestamp} is off the {resolution}s grid", row=row)
            snapshots.extend([None] * (gap // step - 1))
        snapshots.append(snap)
        prev_ts = snap.timestamp
    return LobSeries(snapshots, resolution=resolution)


def serialize_snapshot_csv(series, stream):
    """Write present snapshots back out; %.17g keeps 15+ significant digits."""
    for snap in series.snapshots:
        if snap is None:
            continue
        cells = [str(snap.timestamp)] + [f"{v:.17g}" for v in snap.to_row()]
        stream.write(",".join(cells) + "\n")


def parse_fi2010(stream):
    """Parse a sample-major 45-column feature file, re-coding label columns."""
    features, labels = [], []
    for row, line in enumerate(_text_lines(stream)):
        if not line.strip():
            continue
        if row == 0 and _looks_like_header(line):
            continue
        values = _parse_cells(line, row, FI2010_COLUMNS)
        feats = values[:40]
        if not all(np.isfinite(v) for v in feats):
            raise IngestError("non-finite feature value", row=row)
        coded = []
        for j, raw in enumerate(values[40:]):
            code = int(raw)
            if code != raw or code not in FI2010_LABEL_MAP:
                raise IngestError(
                    f"label code {raw!r} in column {41 + j} is not in {sorted(FI2010_LABEL_MAP)}",
                    row=row)
            coded.append(FI2010_LABEL_MAP[code])
        features.append(feats)
        labels.append(coded)
    return FeatureMatrix(
        features=np.asarray(features, dtype=np.float64).reshape(-1, 40),
        labels=np.asarray(labels, dtype=np.int8).reshape(-1, 5))


def impute_locf(series):
    """Fill gaps with the most recent present snapshot (new series; inputs untouched)."""
    if series.snapshots and series.snapshots[0] is None:
        raise IngestError("series starts with a missing value; nothing to carry forward", row=0)
    timestamps = series.timestamps()
    filled = []
    last = None
    for i, snap in enumerate(series.snapshots):
        if snap is None:
            snap = LobSnapshot(int(timestamps[i]), last.asks, last.bids)
        else:
            last = snap
        filled.append(snap)
    return LobSeries(filled, resolution=series.resolution,
                     missing_mask=[False] * len(filled))


def impute_mean(series):
    """Fill gaps with the average of the bracketing snapshots.

    Exposed for experimentation only: averaging smears the book across the
    gap and distorts level dynamics, so last-value-forward is the default.
    Trailing gaps (no next value) fall back to carry-forward.
    """
    if series.snapshots and series.snapshots[0] is None:
        raise IngestError("series starts with a missing value", row=0)
    timestamps = series.timestamps()
    nxt = [None] * len(series.snapshots)
    upcoming = None
    for i in range(len(series.snapshots) - 1, -1, -1):
        if series.snapshots[i] is not None:
            upcoming = series.snapshots[i]
        nxt[i] = upcoming
    filled = []
    last = None
    for i, snap in enumerate(series.snapshots):
        if snap is None:
            if nxt[i] is None:
                snap = LobSnapshot(int(timestamps[i]), last.asks, last.bids)
            else:
                mean_row = [(a + b) / 2.0 for a, b in zip(last.to_row(), nxt[i].to_row())]
                snap = LobSnapshot.from_row(int(timestamps[i]), mean_row)
        else:
            last = snap
        filled.append(snap)
    return LobSeries(filled, resolution=series.resolution,
                     missing_mask=[False] * len(filled))


def fetch_depth(endpoint, symbol, levels=LEVELS, timeout=10.0, http_get=None):
    """Fetch one snapshot from a depth endpoint.

    ``endpoint`` is a URL template with {symbol} and {levels} placeholders.
    The document must contain "bids" and "asks" arrays of [price, volume]
    string pairs (best first) and a "timestamp" field (epoch ms). Intended
    for an opt-in polling collector; tests inject ``http_get``.
    """
    if levels < LEVELS:
        raise ValueError(f"levels must be >= {LEVELS} to fill a snapshot, got {levels}")
    url = endpoint.format(symbol=symbol, levels=levels)
    if http_get is None:
        def http_get(u):
            with urllib.request.urlopen(u, timeout=timeout) as resp:
                return resp.read()
    try:
        raw = http_get(url)
    except Exception as exc:
        raise DepthFeedError(f"depth request failed for {url}: {exc}") from exc
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise DepthFeedError(f"depth response is not JSON: {exc}") from None
    for key in ("bids", "asks", "timestamp"):
        if key not in doc:
            raise DepthFeedError(f"depth document missing field {key!r}")
    for side in ("bids", "asks"):
        if len(doc[side]) < levels:
            raise DepthFeedError(
                f"insufficient depth: {len(doc[side])} {side} levels, need {levels}")
    asks = tuple((float(p), float(v)) for p, v in doc["asks"][:LEVELS])
    bids = tuple((float(p), float(v)) for p, v in doc["bids"][:LEVELS])
    snap = LobSnapshot(int(doc["timestamp"]), asks, bids)
    try:
        snap.validate()
    except ValueError as exc:
        raise DepthFeedError(f"depth document invalid: {exc}") from None
    return snap
