"""Label-driven portfolio allocation, classical baselines, and a backtester.

The allocator is an LSTM over one rebalance period of per-asset trend
labels (one-hot encoded per step) followed by a dense softmax head, so its
weights are long-only and fully invested by construction. It trains
against either of two differentiable objectives on the realized portfolio
return series R:

    sharpe loss      -mean(R) / std(R)
    volatility loss   std(R)

where R collects per-step returns of the following period under the
decided weights and std is the population deviation. Rebalancing happens
every ``period`` label steps (10 five-minute steps = 50 minutes by
default). Classical baselines: mean-variance optimization over the
simplex (max Sharpe or min volatility) and the 1/n portfolio. The
backtester compounds p_t = p_{t-1} * sum_i w_i * (p_{i,t} / p_{i,t-1})
with weights held fixed within a period and no transaction costs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from . import tensor as T

DEFAULT_PERIOD = 10  # label steps per rebalance (50 min at 5-min resolution)
STD_FLOOR = 1e-12

CRITERION_MAX_SR = "max-sr"
CRITERION_MIN_VOL = "min-vol"


class DegenerateRiskError(ValueError):
    """Constant return series: the Sharpe ratio is undefined."""


# -- returns and losses ---------------------------------------------------------

def returns(prices):
    """Simple per-step returns (p_t - p_{t-1}) / p_{t-1}, per asset column."""
    p = np.asarray(prices, dtype=np.float64)
    if (p <= 0).any():
        raise ValueError("prices must be positive")
    return p[1:] / p[:-1] - 1.0


def sharpe_loss(r):
    """Negative Sharpe ratio of a portfolio return series (differentiable)."""
    r = T._as_tensor(r)
    if r.size < 2:
        raise ValueError("need at least two returns for a Sharpe ratio")
    s = T.std(r)
    if float(s.data) < STD_FLOOR:
        raise DegenerateRiskError("constant returns: Sharpe ratio undefined")
    return -T.mean(r) / s


def volatility_loss(r):
    """Population standard deviation of a portfolio return series."""
    r = T._as_tensor(r)
    if r.size < 2:
        raise ValueError("need at least two returns for a deviation")
    return T.std(r)


# -- the learned allocator --------------------------------------------------------

def encode_label_window(labels):
    """One-hot encode an (n_assets, steps) label block to (steps, 3 * n)."""
    labels = np.asarray(labels)
    if not np.isin(labels, (-1, 0, 1)).all():
        raise ValueError("labels must lie in {-1, 0, +1}")
    n, steps = labels.shape
    out = np.zeros((steps, 3 * n), dtype=np.float32)
    for i in range(n):
        out[np.arange(steps), 3 * i + (labels[i] + 1)] = 1.0
    return out


class AllocatorNet:
    """LSTM over one period of label indicators, dense softmax head."""

    def __init__(self, n_assets, hidden=64, seed=0, scheme="glorot",
                 dtype=T.DEFAULT_DTYPE):
        rng = np.random.default_rng(seed)
        self.n_assets = n_assets
        self.lstm = L.LSTM(3 * n_assets, hidden, rng=rng, scheme=scheme, dtype=dtype)
        self.head = L.Dense(hidden, n_assets, rng=rng, scheme=scheme, dtype=dtype)

    def __call__(self, x):
        """x: Tensor (B, steps, 3n) -> weights (B, n) on the simplex."""
        return T.softmax(self.head(self.lstm(x)), axis=1)

    def parameters(self):
        return {**L.namespaced("lstm", self.lstm.parameters()),
                **L.namespaced("head", self.head.parameters())}


def allocate(net, label_window):
    """Weights for the next period from one (n_assets, period) label block."""
    x = encode_label_window(label_window)
    if label_window.shape[0] != net.n_assets:
        raise ValueError(f"net expects {net.n_assets} assets, got {label_window.shape[0]}")
    with T.no_grad():
        w = net(T.tensor(x[None]))
    w = w.data[0].astype(np.float64)
    return w / w.sum()  # repair float32 softmax rounding


@dataclass
class AllocatorConfig:
    loss: str = "sr"  # "sr" maximizes Sharpe, "mv" minimizes volatility
    lr: float = 0.001
    batch: int = 64
    epochs: int = 40
    period: int = DEFAULT_PERIOD
    seed: int = 0

    def __post_init__(self):
        if self.loss not in ("sr", "mv"):
            raise ValueError(f"loss must be 'sr' or 'mv', got {self.loss!r}")
        if self.period < 1:
            raise ValueError("period must be >= 1")


def rebalance_points(n_steps, period):
    """Decision indices d with a full label window [d-period+1 .. d] and a
    full following period of returns [d+1 .. d+period]."""
    first = period - 1
    last = n_steps - 1 - period
    if last < first:
        return np.zeros(0, dtype=np.int64)
    return np.arange(first, last + 1, period)


def train_allocator(net, labels, prices, cfg):
    """Fit the allocator on aligned label and price streams.

    ``labels`` is (n_assets, S); ``prices`` is (S, n_assets) mid-prices on
    the same grid. Each training sample pairs one trailing label window
    with the realized returns of the period right after it; the loss sees
    the batch's pooled per-step portfolio returns. Returns the per-epoch
    loss history.
    """
    labels = np.asarray(labels)
    prices = np.asarray(prices, dtype=np.float64)
    n, steps = labels.shape
    if prices.shape != (steps, n):
        raise ValueError(f"prices shape {prices.shape} does not match labels {(n, steps)}")
    r = returns(prices)  # r[t] is the return over (t, t+1]
    period = cfg.period
    points = rebalance_points(steps, period)
    if len(points) == 0:
        raise ValueError(f"series too short for period {period}")
    x_all = np.stack([encode_label_window(labels[:, d - period + 1:d + 1]) for d in points])
    r_next = np.stack([r[d:d + period] for d in points])  # (J, period, n)

    rng = np.random.default_rng(cfg.seed)
    opt = L.Adam(net.parameters(), lr=cfg.lr)
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(points))
        losses = []
        for lo in range(0, len(order), cfg.batch):
            idx = order[lo:lo + cfg.batch]
            w = net(T.tensor(x_all[idx]))  # (B, n)
            port = T.tsum(w.reshape(len(idx), 1, net.n_assets)
                          * T.tensor(r_next[idx].astype(np.float32)), axis=2)
            flat = port.reshape(-1)
            try:
                loss = sharpe_loss(flat) if cfg.loss == "sr" else volatility_loss(flat)
            except DegenerateRiskError:
                warnings.warn("degenerate Sharpe on batch; skipped")
                continue
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        history.append(float(np.mean(losses)) if losses else np.nan)
    return history


def rebalance_weights(net, labels, period=DEFAULT_PERIOD):
    """Walk a label stream and emit (decision indices, weights per decision).

    Decisions at index d use only labels up to d; the caller applies each
    weight vector to the following period.
    """
    labels = np.asarray(labels)
    points = rebalance_points(labels.shape[1], period)
    weights = np.stack([allocate(net, labels[:, d - period + 1:d + 1]) for d in points]) \
        if len(points) else np.zeros((0, net.n_assets))
    return points, weights


# -- classical baselines ------------------------------------------------------------

def equal_weight(n):
    if n < 1:
        raise ValueError(f"need at least one asset, got {n}")
    return np.full(n, 1.0 / n)


@dataclass
class MarkowitzInputs:
    mu: np.ndarray       # expected returns per asset
    cov: np.ndarray      # covariance, symmetrized and eigenvalue-floored
    window: int = 50     # trailing periods used by estimate_inputs

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        cov = (cov + cov.T) / 2.0
        vals, vecs = np.linalg.eigh(cov)
        self.cov = (vecs * np.maximum(vals, 0.0)) @ vecs.T


def estimate_inputs(asset_returns, window=50):
    """Trailing mean/covariance estimates from an (S, n) return matrix."""
    r = np.asarray(asset_returns, dtype=np.float64)
    tail = r[-window:]
    if len(tail) < 2:
        raise ValueError("need at least two return rows to estimate a covariance")
    mu = tail.mean(axis=0)
    centered = tail - mu
    cov = centered.T @ centered / len(tail)
    return MarkowitzInputs(mu=mu, cov=cov, window=window)


def project_simplex(v):
    """Euclidean projection onto {w : w >= 0, sum w = 1} (sort-based)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    rho = np.nonzero(u * np.arange(1, len(v) + 1) > css)[0][-1]
    return np.maximum(v - css[rho] / (rho + 1.0), 0.0)


def _vol(w, cov):
    return float(np.sqrt(max(w @ cov @ w, 0.0)))


def _sharpe(w, mu, cov):
    s = _vol(w, cov)
    return float(mu @ w) / max(s, STD_FLOOR)


def markowitz(inputs, criterion, restarts=50, iters=1500, seed=0):
    """Long-only mean-variance weights by projected gradient with restarts.

    criterion "min-vol" minimizes sqrt(w' cov w); "max-sr" maximizes
    mu'w / sqrt(w' cov w). Starts from 1/n, every single-asset corner, and
    ``restarts`` Dirichlet draws; keeps the best objective seen.
    """
    mu, cov = inputs.mu, inputs.cov
    n = len(mu)
    if criterion not in (CRITERION_MAX_SR, CRITERION_MIN_VOL):
        raise ValueError(f"unknown criterion {criterion!r}")
    if criterion == CRITERION_MAX_SR and not np.any(mu != 0):
        raise ValueError("max Sharpe is undefined for an all-zero mean vector")
    rng = np.random.default_rng(seed)
    lip = 2.0 * max(np.linalg.eigvalsh(cov).max(), STD_FLOOR)
    starts = [equal_weight(n)] + [np.eye(n)[i] for i in range(n)]
    starts += [rng.dirichlet(np.ones(n)) for _ in range(restarts)]

    def objective(w):
        return _vol(w, cov) if criterion == CRITERION_MIN_VOL else -_sharpe(w, mu, cov)

    best_w, best_obj = None, np.inf
    for w in starts:
        w = project_simplex(w)
        for it in range(iters):
            if criterion == CRITERION_MIN_VOL:
                grad = 2.0 * cov @ w
                step = 1.0 / lip
            else:
                s = max(_vol(w, cov), STD_FLOOR)
                grad = -(mu / s - float(mu @ w) * (cov @ w) / s ** 3)
                step = 0.1 / (1.0 + 0.01 * it)
            w_next = project_simplex(w - step * grad)
            if np.abs(w_next - w).max() < 1e-12:
                w = w_next
                break
            w = w_next
        obj = objective(w)
        if obj < best_obj:
            best_obj, best_w = obj, w
    return best_w


# -- backtesting ---------------------------------------------------------------------

@dataclass
class BacktestResult:
    values: np.ndarray          # portfolio value per step, values[0] = 1
    weights: np.ndarray         # (J, n) weight vector per rebalance decision
    decisions: np.ndarray       # step index of each decision
    period: int
    step_returns: np.ndarray    # per-step portfolio returns
    period_returns: np.ndarray  # per-rebalance-period portfolio returns


@dataclass
class PortfolioSummary:
    expected_return: float      # final value over initial value
    mean_return: float          # mean per-period return
    std_return: float           # population std of per-period returns
    sharpe: float               # mean / std, zero risk-free rate
    pos_neg_ratio: float        # positive / negative period-return counts
    sharpe_defined: bool = True
    pos_neg_finite: bool = True


def _check_weights(w, n):
    if w.shape != (n,):
        raise ValueError(f"weight vector shape {w.shape}, expected ({n},)")
    if (w < -1e-9).any() or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"weights off the simplex: sum={w.sum()!r}, min={w.min()!r}")


def backtest(weights, prices, period=DEFAULT_PERIOD, decisions=None,
             recursion="gross"):
    """Compound a weight schedule over mid-prices, no transaction costs.

    ``weights`` is (J, n); decision j happens at step ``decisions[j]``
    (defaults to j * period) and its weights govern the next ``period``
    steps. Weights must be decided from information up to their decision
    step only; this function just compounds. ``recursion`` selects the
    value update: "gross" uses p_t = p_{t-1} * w . (p_t / p_{t-1}), the
    alternative "return-ratio" reading divides consecutive simple returns
    and errors on zero denominators.
    """
    weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    prices = np.asarray(prices, dtype=np.float64)
    n_steps, n_assets = prices.shape
    J = len(weights)
    decisions = (np.arange(J, dtype=np.int64) * period if decisions is None
                 else np.asarray(decisions, dtype=np.int64))
    if len(decisions) != J:
        raise ValueError(f"{J} weight rows but {len(decisions)} decisions")
    if np.any(np.diff(decisions) != period):
        raise ValueError("decisions must advance by exactly one period")
    if decisions[-1] + period >= n_steps:
        raise ValueError("price series too short for the final period")
    for w in weights:
        _check_weights(w, n_assets)

    r = returns(prices)  # r[t] covers (t, t+1]
    gross = 1.0 + r
    values = [1.0]
    step_returns = []
    for j, d in enumerate(decisions):
        for t in range(d, d + period):
            if recursion == "gross":
                growth = float(weights[j] @ gross[t])
            elif recursion == "return-ratio":
                if j == 0 and t == d:
                    growth = float(weights[j] @ gross[t])
                else:
                    prev = r[t - 1]
                    if np.any(prev == 0):
                        raise ValueError("return-ratio recursion hit a zero return")
                    growth = float(weights[j] @ (r[t] / prev))
            else:
                raise ValueError(f"unknown recursion {recursion!r}")
            values.append(values[-1] * growth)
            step_returns.append(growth - 1.0)
    values = np.asarray(values)
    period_values = values[::period]
    return BacktestResult(values=values, weights=weights, decisions=decisions,
                          period=period, step_returns=np.asarray(step_returns),
                          period_returns=period_values[1:] / period_values[:-1] - 1.0)


def portfolio_metrics(result):
    """Summary in the usual comparison columns; flags degenerate cases."""
    values = result.values
    if len(values) < 2:
        raise ValueError("empty backtest")
    rp = result.period_returns
    mean = float(rp.mean())
    std = float(rp.std())
    sharpe_defined = std > STD_FLOOR
    sharpe = mean / std if sharpe_defined else float("nan")
    pos = int((rp > 0).sum())
    neg = int((rp < 0).sum())
    finite = neg > 0
    ratio = pos / neg if finite else float("inf")
    return PortfolioSummary(expected_return=float(values[-1] / values[0]),
                            mean_return=mean, std_return=std, sharpe=sharpe,
                            pos_neg_ratio=ratio, sharpe_defined=sharpe_defined,
                            pos_neg_finite=finite)


def cumulative_log_returns(values):
    """ln(p_t / p_0) per step; for the comparison chart's log scale."""
    values = np.asarray(values, dtype=np.float64)
    if (values <= 0).any():
        raise ValueError("portfolio values must be positive")
    return np.log(values / values[0])
