"""Seed-deterministic synthetic book data with planted momentum regimes.

Each asset follows a geometric random walk whose drift switches between
up, flat, and down regimes under a sticky Markov chain (mean regime length
1 / (1 - stay)). Momentum is therefore real and learnable: the recent
window reveals the current regime, and the regime predicts near-future
trend labels. Books are built around the mid-price with a small spread,
strictly ordered levels, and lognormal volumes; a configurable fraction of
rows is dropped to exercise gap imputation downstream.

Assets get staggered drift/volatility scales so that following the labels
actually beats naive equal weighting in the bundled end-to-end experiment.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ingest import LEVELS

ASSET_NAMES = ("alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta")

# per-asset staggering of the base drift/vol (cycled when n_assets > len)
DRIFT_SCALES = (1.4, 1.0, 0.8, 0.6)
VOL_SCALES = (1.0, 1.1, 0.9, 1.2)


@dataclass(frozen=True)
class DemoConfig:
    steps: int = 10_000
    n_assets: int = 4
    resolution: int = 300          # seconds per step
    seed: int = 0
    start_time_ms: int = 1_577_836_800_000  # 2020-01-01T00:00Z, on the grid
    base_price: float = 100.0
    drift: float = 0.0025          # per-step log drift inside a trend regime
    vol: float = 0.0012            # per-step log volatility
    regime_stay: float = 0.98      # self-transition probability
    reversion: float = 0.99        # pull of the oscillation toward the anchor
    anchor_drift: float = 0.00005  # slow per-step log drift of the anchor
    gap_rate: float = 0.005        # fraction of rows dropped (never the first)
    spread: float = 2e-4           # half-spread as a fraction of mid

    def asset_names(self):
        return [ASSET_NAMES[i % len(ASSET_NAMES)] + ("" if i < len(ASSET_NAMES) else str(i))
                for i in range(self.n_assets)]


def _regimes(steps, stay, rng):
    """Sticky three-state chain over {-1, 0, +1}, uniform start."""
    states = np.array([-1, 0, 1])
    out = np.empty(steps, dtype=np.int8)
    out[0] = rng.choice(states)
    switch = (1.0 - stay) / 2.0
    for t in range(1, steps):
        u = rng.random()
        if u < stay:
            out[t] = out[t - 1]
        else:
            others = states[states != out[t - 1]]
            out[t] = others[0] if u < stay + switch else others[1]
    return out


def generate_paths(cfg):
    """(mids (steps, n), regimes (steps, n)) for every asset.

    log price = slow anchor + mean-reverting oscillation driven by the
    regime drift. The pull keeps the multi-day price range bounded, so
    window-scale trends stay visible after trailing-window normalization
    while the per-step move distribution (what the labels threshold) is
    still dominated by regime drift plus noise.
    """
    rng = np.random.default_rng(cfg.seed)
    mids = np.empty((cfg.steps, cfg.n_assets))
    regimes = np.empty((cfg.steps, cfg.n_assets), dtype=np.int8)
    for i in range(cfg.n_assets):
        drift = cfg.drift * DRIFT_SCALES[i % len(DRIFT_SCALES)]
        vol = cfg.vol * VOL_SCALES[i % len(VOL_SCALES)]
        reg = _regimes(cfg.steps, cfg.regime_stay, rng)
        shocks = rng.normal(size=cfg.steps)
        osc = np.empty(cfg.steps)
        osc[0] = 0.0
        for t in range(1, cfg.steps):
            osc[t] = cfg.reversion * osc[t - 1] + drift * reg[t - 1] + vol * shocks[t]
        anchor = np.log(cfg.base_price * (1.0 + 0.1 * i)) \
            + cfg.anchor_drift * DRIFT_SCALES[i % len(DRIFT_SCALES)] * np.arange(cfg.steps)
        mids[:, i] = np.exp(anchor + osc)
        regimes[:, i] = reg
    return mids, regimes


def book_rows(mids_one, cfg, rng):
    """(steps, 40) book matrix in canonical column order around given mids."""
    steps = len(mids_one)
    half = cfg.spread * mids_one
    # strictly increasing level offsets, jittered but never zero
    level_gap = 0.5 * cfg.spread * mids_one[:, None] * (
        1.0 + 0.3 * rng.random((steps, LEVELS)))
    ask_prices = mids_one[:, None] + half[:, None] + np.cumsum(level_gap, axis=1) \
        - level_gap[:, :1] * 0.5
    bid_gap = 0.5 * cfg.spread * mids_one[:, None] * (
        1.0 + 0.3 * rng.random((steps, LEVELS)))
    bid_prices = mids_one[:, None] - half[:, None] - np.cumsum(bid_gap, axis=1) \
        + bid_gap[:, :1] * 0.5
    ask_vol = np.exp(rng.normal(1.0, 0.5, (steps, LEVELS)))
    bid_vol = np.exp(rng.normal(1.0, 0.5, (steps, LEVELS)))
    out = np.empty((steps, 4 * LEVELS))
    out[:, 0:2 * LEVELS:2] = ask_prices
    out[:, 1:2 * LEVELS:2] = ask_vol
    out[:, 2 * LEVELS::2] = bid_prices
    out[:, 2 * LEVELS + 1::2] = bid_vol
    return out


def write_demo_csvs(cfg, out_dir):
    """Write one snapshot CSV per asset; returns {asset: path}.

    The generated mids place the best ask at mid + half-spread(1+jitter)
    and best bid symmetric below, so (ask1 + bid1) / 2 is close to, not
    exactly, the latent mid.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mids, _ = generate_paths(cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    step_ms = cfg.resolution * 1000
    timestamps = cfg.start_time_ms + step_ms * np.arange(cfg.steps, dtype=np.int64)
    paths = {}
    for i, asset in enumerate(cfg.asset_names()):
        rows = book_rows(mids[:, i], cfg, rng)
        keep = rng.random(cfg.steps) >= cfg.gap_rate
        keep[0] = True
        path = out_dir / f"{asset}.csv"
        with open(path, "w") as fh:
            for t in range(cfg.steps):
                if not keep[t]:
                    continue
                cells = [str(timestamps[t])] + [f"{v:.10g}" for v in rows[t]]
                fh.write(",".join(cells) + "\n")
        paths[asset] = path
    return paths
