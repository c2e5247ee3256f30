"""Turn book series into normalized, windowed, labeled training samples.

The chain is: mid-price from best bid/ask, trailing-window z-normalization
of the 40 feature columns (statistics from the previous ``window_days``
days only, never the day being normalized), k-step smoothed trend labels
against a relative threshold alpha, and dense sliding windows of length T
paired with the label at the window's last step.

Labels come in two variants. Both compare k-step mid-price averages:

    m_minus(t) = mean(p[t-k+1 .. t])      (k terms, includes t)
    m_plus(t)  = mean(p[t+1 .. t+k])      (k strictly future terms)

    pt: l_t = (m_plus(t) - p_t) / p_t
    mm: l_t = (m_plus(t) - m_minus(t)) / m_minus(t)

    label = +1 if l_t > alpha, -1 if l_t < -alpha, else 0

The mm variant smooths both sides and is the default; alpha defaults to
0.001 (a 0.1% move).
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .ingest import LEVELS

FEATURES = 4 * LEVELS
MS_PER_DAY = 86_400_000
DFWD_MAGIC = b"DFWD"
DFWD_VERSION = 1


# -- mid price ------------------------------------------------------------------

def mid_price(snapshot):
    """Average of best ask and best bid."""
    return (snapshot.asks[0][0] + snapshot.bids[0][0]) / 2.0


def mid_price_series(series):
    """Mid-price per snapshot; the series must be gap-free (impute first)."""
    if any(s is None for s in series.snapshots):
        raise ValueError("series has unimputed gaps")
    return np.array([mid_price(s) for s in series.snapshots], dtype=np.float64)


def day_ids(timestamps_ms):
    """Calendar-day index per timestamp (UTC days)."""
    return np.asarray(timestamps_ms, dtype=np.int64) // MS_PER_DAY


# -- dynamic z-normalization -------------------------------------------------------

@dataclass
class ZNormResult:
    values: np.ndarray          # (M, F) normalized rows
    rows: np.ndarray            # (M,) indices into the input
    dropped_days: list          # day ids without a full trailing window
    clamped_features: list      # features whose sigma hit the floor somewhere


SIGMA_FLOOR = 1e-8


def dynamic_znorm(features, days, window_days=5):
    """Normalize each day with mean/std of the previous ``window_days`` days.

    Uses the population standard deviation. Days whose full trailing window
    is not present are dropped and reported, not silently normalized with a
    short window. A per-feature sigma below 1e-8 (flat column) is clamped
    to avoid division by zero and reported via a warning.
    """
    features = np.asarray(features, dtype=np.float64)
    days = np.asarray(days, dtype=np.int64)
    if len(features) != len(days):
        raise ValueError(f"{len(features)} rows but {len(days)} day ids")
    present = np.unique(days)
    out_rows, out_vals, dropped = [], [], []
    clamped = set()
    for day in present:
        window = present[(present >= day - window_days) & (present < day)]
        if len(window) < window_days:
            dropped.append(int(day))
            continue
        sel = (days >= day - window_days) & (days < day)
        mu = features[sel].mean(axis=0)
        sigma = features[sel].std(axis=0)  # population
        low = sigma < SIGMA_FLOOR
        if low.any():
            clamped.update(np.flatnonzero(low).tolist())
            sigma = np.where(low, SIGMA_FLOOR, sigma)
        idx = np.flatnonzero(days == day)
        out_rows.append(idx)
        out_vals.append((features[idx] - mu) / sigma)
    if not out_rows:
        raise ValueError(f"no day has {window_days} full preceding days")
    if clamped:
        warnings.warn(f"sigma floor {SIGMA_FLOOR} applied to features "
                      f"{sorted(clamped)}")
    return ZNormResult(values=np.concatenate(out_vals),
                       rows=np.concatenate(out_rows),
                       dropped_days=dropped,
                       clamped_features=sorted(clamped))


# -- labeling ------------------------------------------------------------------------

def smooth_means(p, k):
    """Backward and forward k-step means, NaN where undefined.

    m_minus[t] averages p[t-k+1 .. t]; m_plus[t] averages the k strictly
    future values p[t+1 .. t+k].
    """
    p = np.asarray(p, dtype=np.float64)
    n = len(p)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k >= n:
        raise ValueError(f"k={k} too large for a series of length {n}")
    rolled = np.lib.stride_tricks.sliding_window_view(p, k).mean(axis=1)  # mean(p[i:i+k])
    m_minus = np.full(n, np.nan)
    m_plus = np.full(n, np.nan)
    m_minus[k - 1:] = rolled
    m_plus[:n - k] = rolled[1:]
    return m_minus, m_plus


@dataclass(frozen=True)
class LabelingConfig:
    k: int
    alpha: float = 0.001
    variant: str = "mm"  # "pt" compares m_plus to p_t, "mm" to m_minus

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"horizon k must be >= 1, got {self.k}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.variant not in ("pt", "mm"):
            raise ValueError(f"variant must be 'pt' or 'mm', got {self.variant!r}")


@dataclass
class Labels:
    values: np.ndarray  # int8, full series length; only ``valid`` is meaningful
    valid: slice


def label_series(p, cfg):
    """Three-class trend labels from smoothed relative mid-price changes."""
    p = np.asarray(p, dtype=np.float64)
    if (p <= 0).any():
        raise ValueError("mid-prices must be positive")
    m_minus, m_plus = smooth_means(p, cfg.k)
    if cfg.variant == "pt":
        l = (m_plus - p) / p
    else:
        l = (m_plus - m_minus) / m_minus
    values = np.zeros(len(p), dtype=np.int8)
    with np.errstate(invalid="ignore"):
        values[l > cfg.alpha] = 1
        values[l < -cfg.alpha] = -1
    return Labels(values=values, valid=slice(cfg.k - 1, len(p) - cfg.k))


# -- windows --------------------------------------------------------------------------

@dataclass(frozen=True)
class LabeledWindow:
    features: np.ndarray  # (T, F) float32 view
    label: int            # -1, 0, +1
    t_end: int            # absolute index of the window's last timestep
    asset: str = ""


class WindowDataset:
    """Chronological labeled windows over one asset's feature matrix.

    Windows are materialized lazily from a shared base matrix, so slicing
    and batching stay cheap. ``offset`` maps local timestep 0 back to the
    absolute row of the source series (set when leading rows were dropped
    by normalization).
    """

    def __init__(self, base, ends, labels, T, asset="", offset=0):
        self.base = np.ascontiguousarray(base, dtype=np.float32)
        self.ends = np.asarray(ends, dtype=np.int64)
        self.labels = np.asarray(labels, dtype=np.int8)
        self.T = int(T)
        self.asset = asset
        self.offset = int(offset)
        if len(self.ends) != len(self.labels):
            raise ValueError("ends and labels length mismatch")

    def __len__(self):
        return len(self.ends)

    def __getitem__(self, i):
        t = int(self.ends[i])
        return LabeledWindow(features=self.base[t - self.T + 1:t + 1],
                             label=int(self.labels[i]),
                             t_end=self.offset + t,
                             asset=self.asset)

    def batch(self, indices):
        """(X, y): X is (B, 1, T, F) float32, y holds labels in {-1, 0, +1}."""
        idx = np.asarray(indices)
        t = self.ends[idx]
        x = np.stack([self.base[e - self.T + 1:e + 1] for e in t])
        return x[:, None, :, :], self.labels[idx].astype(np.int64)

    def slice(self, lo, hi):
        return WindowDataset(self.base, self.ends[lo:hi], self.labels[lo:hi],
                             self.T, asset=self.asset, offset=self.offset)

    def absolute_ends(self):
        return self.offset + self.ends


def make_windows(features, labels, T, stride=1, asset="", offset=0):
    """Dense sliding windows [t-T+1 .. t] paired with label(t).

    Yields floor((N - T) / stride) + 1 windows for N aligned rows.
    """
    features = np.asarray(features)
    labels = np.asarray(labels)
    n = len(features)
    if len(labels) != n:
        raise ValueError(f"{n} feature rows but {len(labels)} labels")
    if T < 1 or stride < 1:
        raise ValueError("T and stride must be >= 1")
    if T > n:
        raise ValueError(f"window length {T} exceeds series length {n}")
    ends = np.arange(T - 1, n, stride)
    return WindowDataset(features, ends, labels[ends], T, asset=asset, offset=offset)


def windows_from_series(features, days, mids, cfg, T, stride=1, window_days=5,
                        asset=""):
    """Full per-asset chain: z-norm, label, align, window.

    Returns (dataset, znorm_result, labels). The dataset's ``offset``
    points back into the original series so window ends can be matched to
    mid-prices for backtesting.
    """
    z = dynamic_znorm(features, days, window_days=window_days)
    if not np.array_equal(z.rows, np.arange(z.rows[0], z.rows[0] + len(z.rows))):
        raise ValueError("normalized rows are not contiguous; check day ids")
    lab = label_series(mids, cfg)
    start = max(int(z.rows[0]), lab.valid.start)
    stop = lab.valid.stop
    if stop - start < T:
        raise ValueError(f"only {stop - start} usable rows after normalization "
                         f"and labeling, need at least T={T}")
    feats = z.values[start - z.rows[0]:stop - z.rows[0]]
    labels = lab.values[start:stop]
    ds = make_windows(feats, labels, T, stride=stride, asset=asset, offset=start)
    return ds, z, lab


# -- chronological splits ----------------------------------------------------------------

MODE_PER_ASSET = "per-asset"
MODE_COMBINED = "combined"
MODE_HOLDOUT = "holdout"


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple = (0.7, 0.15, 0.15)
    mode: str = MODE_PER_ASSET
    holdout: str = ""

    def __post_init__(self):
        if len(self.fractions) != 3:
            raise ValueError("need train/val/test fractions")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"fractions must sum to 1, got {self.fractions}")
        if any(f < 0 for f in self.fractions):
            raise ValueError("fractions must be non-negative")
        if self.mode not in (MODE_PER_ASSET, MODE_COMBINED, MODE_HOLDOUT):
            raise ValueError(f"unknown split mode {self.mode!r}")
        if self.mode == MODE_HOLDOUT and not self.holdout:
            raise ValueError("holdout mode needs an asset name")


@dataclass
class SplitResult:
    train: dict  # asset -> WindowDataset
    val: dict
    test: dict

    def train_assets(self):
        return sorted(self.train)


def split(datasets, spec):
    """Chronological train/val/test partition of per-asset window sets.

    Rounding rule: train and val take the floor of their fractions, test
    takes the remainder, so counts are reproducible. In combined and
    holdout modes every asset keeps its own test set; holdout additionally
    routes the named asset entirely to test.
    """
    if not datasets:
        raise ValueError("no datasets to split")
    if spec.mode == MODE_HOLDOUT and spec.holdout not in datasets:
        raise ValueError(f"holdout asset {spec.holdout!r} not among {sorted(datasets)}")
    f_train, f_val, _ = spec.fractions
    result = SplitResult(train={}, val={}, test={})
    for asset, ds in datasets.items():
        if spec.mode == MODE_HOLDOUT and asset == spec.holdout:
            result.test[asset] = ds
            continue
        n = len(ds)
        n_train = int(np.floor(f_train * n))
        n_val = int(np.floor(f_val * n))
        n_test = n - n_train - n_val
        if min(n_train, n_test) <= 0 or (f_val > 0 and n_val <= 0):
            raise ValueError(f"split of {n} windows for {asset!r} leaves an empty partition")
        result.train[asset] = ds.slice(0, n_train)
        result.val[asset] = ds.slice(n_train, n_train + n_val)
        result.test[asset] = ds.slice(n_train + n_val, n)
    return result


# -- windowed-dataset binary format --------------------------------------------------------

def write_dfwd(path, datasets):
    """Write windows to the DFWD container (label i8 + T x F little-endian f32).

    ``datasets`` is a single WindowDataset or a list; all must share T and
    feature count.
    """
    if isinstance(datasets, WindowDataset):
        datasets = [datasets]
    if not datasets:
        raise ValueError("nothing to write")
    T = datasets[0].T
    f = datasets[0].base.shape[1]
    total = sum(len(d) for d in datasets)
    with open(path, "wb") as fh:
        fh.write(DFWD_MAGIC)
        fh.write(struct.pack("<HIIQ", DFWD_VERSION, T, f, total))
        for ds in datasets:
            if ds.T != T or ds.base.shape[1] != f:
                raise ValueError("datasets disagree on window shape")
            for i in range(len(ds)):
                w = ds[i]
                fh.write(struct.pack("<b", w.label))
                fh.write(np.ascontiguousarray(w.features, dtype="<f4").tobytes())


def read_dfwd(path):
    """Read a DFWD container into (windows (M, T, F) float32, labels (M,) int8)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != DFWD_MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {DFWD_MAGIC!r}")
        version, T, f, count = struct.unpack("<HIIQ", fh.read(18))
        if version != DFWD_VERSION:
            raise ValueError(f"unsupported DFWD version {version}")
        windows = np.empty((count, T, f), dtype=np.float32)
        labels = np.empty(count, dtype=np.int8)
        row_bytes = T * f * 4
        for i in range(count):
            labels[i] = struct.unpack("<b", fh.read(1))[0]
            buf = fh.read(row_bytes)
            if len(buf) != row_bytes:
                raise ValueError(f"truncated DFWD file at sample {i}")
            windows[i] = np.frombuffer(buf, dtype="<f4").reshape(T, f)
    return windows, labels
