"""Trend classifier: convolutional front end, residual blocks, factored
inception, GRU over time, and a 3-way softmax head.

The network consumes (batch, 1, T, 40) z-normalized book windows and emits
a probability simplex over (down, hold, up). Training follows the usual
small-data protocol here: Adam with a large epsilon, softmax
cross-entropy with an L2 penalty, early stopping on a validation metric
with checkpointing of the best epoch, and a hard epoch cap.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import checkpoint as ckpt
from . import layers as L
from . import metrics as M
from . import tensor as T


class TrainingError(RuntimeError):
    """Non-finite loss or an otherwise unusable training state."""


class LeakageError(ValueError):
    """An evaluation set overlaps the assets the model was trained on."""


@dataclass(frozen=True)
class NetConfig:
    T: int = 100
    fcnn_filters: int = 16
    res_blocks: int = 2
    inception_channels: int = 32
    gru_hidden: int = 64
    res_batch_norm: bool = False
    init_scheme: str = "glorot"  # "he" reproduces the dead-start ablation
    seed: int = 0

    def __post_init__(self):
        if self.T < 13:
            raise ValueError(f"T must be >= 13 so the front end keeps a time axis, got {self.T}")
        for name in ("fcnn_filters", "res_blocks", "inception_channels", "gru_hidden"):
            if getattr(self, name) < 0 or (name != "res_blocks" and getattr(self, name) < 1):
                raise ValueError(f"{name} must be positive")


class TrendNet:
    """ResCNN + inception + GRU trend classifier over book windows."""

    def __init__(self, cfg):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        scheme = cfg.init_scheme
        self.fcnn = L.FcnnBlock(cfg.fcnn_filters, rng=rng, scheme=scheme)
        self.res = [L.ResidualBlock(cfg.fcnn_filters, rng=rng, scheme=scheme,
                                    batch_norm=cfg.res_batch_norm)
                    for _ in range(cfg.res_blocks)]
        self.inception = L.InceptionV2(cfg.fcnn_filters, cfg.inception_channels,
                                       rng=rng, scheme=scheme)
        self.gru = L.GRU(self.inception.out_channels, cfg.gru_hidden,
                         rng=rng, scheme=scheme)
        self.head = L.Dense(cfg.gru_hidden, 3, rng=rng, scheme=scheme)

    def parameters(self):
        out = L.namespaced("fcnn", self.fcnn.parameters())
        for i, block in enumerate(self.res):
            out.update(L.namespaced(f"res{i + 1}", block.parameters()))
        out.update(L.namespaced("inception", self.inception.parameters()))
        out.update(L.namespaced("gru", self.gru.parameters()))
        out.update(L.namespaced("head", self.head.parameters()))
        return out

    def n_parameters(self):
        return sum(p.size for p in self.parameters().values())

    def logits(self, x):
        if x.shape[2] != self.cfg.T:
            raise ValueError(f"net built for T={self.cfg.T}, window has T={x.shape[2]}")
        h = self.fcnn(x)
        for block in self.res:
            h = block(h)
        h = self.inception(h)  # (B, C, T', 1)
        b, c, t, _ = h.shape
        h = h.transpose(0, 2, 1, 3).reshape(b, t, c)
        h = self.gru(h)
        return self.head(h)

    def __call__(self, x):
        """Probability rows over (down, hold, up)."""
        return T.softmax(self.logits(x), axis=1)


def build(cfg):
    """Initialized network per the config's seed and scheme."""
    return TrendNet(cfg)


# -- datasets ------------------------------------------------------------------

class ConcatWindows:
    """Several WindowDatasets behind one index space (train/val pooling)."""

    def __init__(self, datasets):
        self.datasets = [d for d in datasets if len(d) > 0]
        if not self.datasets:
            raise ValueError("no non-empty datasets")
        self.offsets = np.cumsum([0] + [len(d) for d in self.datasets])

    def __len__(self):
        return int(self.offsets[-1])

    def batch(self, indices):
        indices = np.asarray(indices)
        xs, ys = [], []
        for d, lo, hi in zip(self.datasets, self.offsets[:-1], self.offsets[1:]):
            local = indices[(indices >= lo) & (indices < hi)] - lo
            if len(local):
                x, y = d.batch(local)
                xs.append(x)
                ys.append(y)
        return np.concatenate(xs), np.concatenate(ys)

    def labels_array(self):
        return np.concatenate([d.labels for d in self.datasets])


def _as_pool(data):
    if isinstance(data, ConcatWindows):
        return data
    if isinstance(data, (list, tuple)):
        return ConcatWindows(list(data))
    if isinstance(data, dict):
        return ConcatWindows([data[k] for k in sorted(data)])
    return ConcatWindows([data])


# -- training --------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    epsilon: float = 1.0
    batch: int = 64
    patience: int = 20
    l2_lambda: float = 1e-4
    monitor: str = "accuracy"  # or "weighted_f1"
    seed: int = 0
    max_epochs: int = 200

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be >= 0")
        if self.monitor not in ("accuracy", "weighted_f1"):
            raise ValueError(f"monitor must be 'accuracy' or 'weighted_f1', got {self.monitor!r}")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_metric: float


@dataclass
class FitResult:
    params: dict          # best-epoch parameter arrays (copies)
    best_metric: float
    best_epoch: int
    history: list         # [EpochStats]
    stopped_early: bool


def _cross_entropy(net, x, y_idx, l2_lambda, params):
    logits = net.logits(T.tensor(x))
    logp = T.log_softmax(logits, axis=1)
    picked = logp[(np.arange(len(y_idx)), y_idx)]
    loss = -T.mean(picked)
    if l2_lambda > 0:
        penalty = None
        for p in params.values():
            term = T.tsum(p * p)
            penalty = term if penalty is None else penalty + term
        loss = loss + l2_lambda * penalty
    return loss


def _eval(net, pool, batch=256):
    """(mean CE loss, predicted labels, true labels) without recording."""
    losses, preds, trues = [], [], []
    with T.no_grad():
        for lo in range(0, len(pool), batch):
            x, y = pool.batch(np.arange(lo, min(lo + batch, len(pool))))
            logits = net.logits(T.tensor(x))
            logp = T.log_softmax(logits, axis=1).data
            y_idx = y + 1
            losses.append(-logp[np.arange(len(y_idx)), y_idx].mean() * len(y_idx))
            preds.append(_argmax_neutral(np.exp(logp)))
            trues.append(y)
    preds = np.concatenate(preds)
    trues = np.concatenate(trues)
    return float(np.sum(losses) / len(pool)), preds, trues


def _metric_value(name, y_true, y_pred):
    if name == "accuracy":
        return float(np.mean(y_true == y_pred))
    return M.report(M.confusion(y_true, y_pred)).weighted_f1


def train(net, train_data, val_data, cfg):
    """Early-stopped training; returns the best checkpoint, not the last.

    Stops once the monitored validation metric has not improved for
    ``patience`` consecutive epochs (or at ``max_epochs``). The returned
    FitResult carries copies of the best epoch's parameters; the live net
    is also restored to them.
    """
    train_pool = _as_pool(train_data)
    val_pool = _as_pool(val_data)
    labels = train_pool.labels_array()
    if not np.isin(labels, (-1, 0, 1)).all():
        raise ValueError("training labels outside {-1, 0, +1}")
    params = net.parameters()
    opt = L.Adam(params, lr=cfg.lr, eps=cfg.epsilon)
    rng = np.random.default_rng(cfg.seed)
    best_metric, best_epoch, best_params = -np.inf, 0, None
    wait = 0
    history = []
    stopped_early = False
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_pool))
        batch_losses = []
        for lo in range(0, len(order), cfg.batch):
            idx = order[lo:lo + cfg.batch]
            x, y = train_pool.batch(idx)
            loss = _cross_entropy(net, x, y + 1, cfg.l2_lambda, params)
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite training loss at epoch {epoch}, "
                                    f"batch starting {lo} (loss={float(loss.data)})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            batch_losses.append(float(loss.data))
        val_loss, val_pred, val_true = _eval(net, val_pool)
        metric = _metric_value(cfg.monitor, val_true, val_pred)
        history.append(EpochStats(epoch=epoch, train_loss=float(np.mean(batch_losses)),
                                  val_loss=val_loss, val_metric=metric))
        if metric > best_metric:
            best_metric, best_epoch = metric, epoch
            best_params = {k: p.data.copy() for k, p in params.items()}
            wait = 0
        else:
            wait += 1
            if wait >= cfg.patience:
                stopped_early = True
                break
    if best_params is None:
        raise TrainingError("no epoch completed")
    for k, p in params.items():
        p.data = best_params[k].copy()
    return FitResult(params=best_params, best_metric=best_metric,
                     best_epoch=best_epoch, history=history,
                     stopped_early=stopped_early)


def write_history_csv(path, history):
    lines = ["epoch,train_loss,val_loss,val_metric"]
    lines += [f"{h.epoch},{h.train_loss:.10g},{h.val_loss:.10g},{h.val_metric:.10g}"
              for h in history]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# -- inference ---------------------------------------------------------------------

def _argmax_neutral(probs):
    """Argmax with ties broken toward hold: scan order 0, -1, +1."""
    reordered = probs[:, (1, 0, 2)]
    pick = reordered.argmax(axis=1)
    return np.array((0, -1, 1), dtype=np.int8)[pick]


def predict(net, windows, batch=256):
    """(labels, probability rows) for a WindowDataset or an (M, T, 40) array."""
    if isinstance(windows, np.ndarray):
        x_all = windows[:, None, :, :] if windows.ndim == 3 else windows
        get = lambda lo, hi: x_all[lo:hi].astype(np.float32)
        n = len(x_all)
    else:
        get = lambda lo, hi: windows.batch(np.arange(lo, hi))[0]
        n = len(windows)
    labels, probs = [], []
    with T.no_grad():
        for lo in range(0, n, batch):
            p = net(T.tensor(get(lo, min(lo + batch, n)))).data
            probs.append(p)
            labels.append(_argmax_neutral(p))
    return np.concatenate(labels), np.concatenate(probs)


def transfer_eval(net, meta, dataset):
    """Score a frozen model on an asset it never saw; guards against leakage."""
    trained_on = set(meta.get("train_assets", []))
    if dataset.asset and dataset.asset in trained_on:
        raise LeakageError(f"asset {dataset.asset!r} was part of training "
                           f"({sorted(trained_on)})")
    pred, _ = predict(net, dataset)
    cm = M.confusion(dataset.labels, pred)
    return cm, M.report(cm)


# -- persistence -------------------------------------------------------------------

def config_hash(net_cfg, train_cfg=None):
    doc = {"net": asdict(net_cfg)}
    if train_cfg is not None:
        doc["train"] = asdict(train_cfg)
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def save(path, net, fit=None, train_cfg=None, train_assets=()):
    meta = {
        "net": asdict(net.cfg),
        "train_assets": sorted(train_assets),
        "config_hash": config_hash(net.cfg, train_cfg),
    }
    if fit is not None:
        meta["best_metric"] = fit.best_metric
        meta["best_epoch"] = fit.best_epoch
    ckpt.save(path, net.parameters(), meta=meta)


def load(path):
    """Rebuild the net from a checkpoint; returns (net, meta)."""
    arrays = ckpt.load(path)
    meta = ckpt.load_meta(path)
    if "net" not in meta:
        raise ValueError(f"checkpoint {path} has no architecture sidecar")
    net = TrendNet(NetConfig(**meta["net"]))
    params = net.parameters()
    missing = set(params) ^ set(arrays)
    if missing:
        raise ValueError(f"checkpoint/architecture mismatch on {sorted(missing)}")
    for name, p in params.items():
        if p.data.shape != arrays[name].shape:
            raise ValueError(f"shape mismatch for {name}: "
                             f"{p.data.shape} vs {arrays[name].shape}")
        p.data = arrays[name].astype(p.data.dtype, copy=True)
    return net, meta
