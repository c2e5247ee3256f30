"""End-to-end orchestration: data -> windows -> classifier -> portfolios.

Every stage is seeded from the run seed, logs one line with its wall time,
and leaves its artifacts in the run directory, so a resolved config
reproduces the whole run bit for bit in single-threaded mode.

Strategy names: "lstm-sr" and "lstm-mv" are the learned allocator trained
with the Sharpe and volatility objectives; "markowitz-sr" / "markowitz-mv"
re-estimate mean/covariance from a trailing window at every rebalance;
"equal" is 1/n. All strategies share one decision grid on the test span,
and the learned allocator is fitted on the validation span's predicted
labels so nothing downstream ever sees test information at fit time.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import classifier as C
from . import config as cfgmod
from . import demo
from . import ingest
from . import metrics as M
from . import portfolio as P
from . import preprocess as pp

LSTM_STRATEGIES = {"lstm-sr": "sr", "lstm-mv": "mv"}
MARKOWITZ_STRATEGIES = {"markowitz-sr": P.CRITERION_MAX_SR,
                        "markowitz-mv": P.CRITERION_MIN_VOL}
KNOWN_STRATEGIES = tuple(LSTM_STRATEGIES) + tuple(MARKOWITZ_STRATEGIES) + ("equal",)


class _Stage:
    def __init__(self, name, log):
        self.name = name
        self.log = log

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def done(self, detail=""):
        dt = time.perf_counter() - self.t0
        self.log(f"[{self.name}] {detail} ({dt:.1f}s)")

    def __exit__(self, *exc):
        return False


def load_series(cfg, out_dir, log=print):
    """Demo generation or CSV ingestion; returns {asset: imputed LobSeries}."""
    data_cfg = cfg["data"]
    with _Stage("ingest", log) as st:
        if data_cfg["source"] == "demo":
            dcfg = demo.DemoConfig(steps=data_cfg["demo_steps"],
                                   n_assets=data_cfg["demo_assets"],
                                   resolution=data_cfg["resolution"],
                                   gap_rate=data_cfg["demo_gap_rate"],
                                   seed=cfg["run"]["seed"])
            paths = demo.write_demo_csvs(dcfg, Path(out_dir) / "data")
        elif data_cfg["source"] == "snapshot-csv":
            assets = data_cfg["assets"] or [Path(p).stem for p in data_cfg["paths"]]
            if len(assets) != len(data_cfg["paths"]):
                raise cfgmod.ConfigError("data.assets must match data.paths")
            paths = {a: Path(p) for a, p in zip(assets, data_cfg["paths"])}
        else:
            raise cfgmod.ConfigError(f"unknown data.source {data_cfg['source']!r}")
        impute = ingest.impute_locf if data_cfg["impute"] == "locf" else ingest.impute_mean
        series = {}
        for asset in sorted(paths):
            with open(paths[asset], "rb") as fh:
                raw = ingest.parse_snapshot_csv(fh, resolution=data_cfg["resolution"])
            series[asset] = impute(raw)
        lengths = {a: len(s) for a, s in series.items()}
        if len(set(lengths.values())) != 1:
            raise ValueError(f"assets must share one grid, got lengths {lengths}")
        st.done(f"{len(series)} assets x {len(next(iter(series.values())))} steps")
    return series


def build_windows(cfg, series, log=print):
    """Per-asset windows plus the mid-price matrix in sorted asset order."""
    p = cfg["preprocess"]
    lab_cfg = pp.LabelingConfig(k=p["k"], alpha=p["alpha"], variant=p["variant"])
    datasets, mids = {}, {}
    with _Stage("preprocess", log) as st:
        for asset, s in series.items():
            feats = s.features()
            days = pp.day_ids(s.timestamps())
            mid = pp.mid_price_series(s)
            ds, _, _ = pp.windows_from_series(feats, days, mid, lab_cfg, p["T"],
                                              stride=p["stride"],
                                              window_days=p["window_days"],
                                              asset=asset)
            datasets[asset] = ds
            mids[asset] = mid
        spec = pp.SplitSpec(fractions=tuple(p["split"]), mode=p["mode"],
                            holdout=p["holdout"])
        result = pp.split(datasets, spec)
        n_train = sum(len(d) for d in result.train.values())
        st.done(f"k={p['k']} T={p['T']} windows: train={n_train} "
                f"val={sum(len(d) for d in result.val.values())} "
                f"test={sum(len(d) for d in result.test.values())}")
    return result, mids


def _subsample(ds, step):
    if step <= 1:
        return ds
    return pp.WindowDataset(ds.base, ds.ends[::step], ds.labels[::step], ds.T,
                            asset=ds.asset, offset=ds.offset)


def train_classifier(cfg, split_result, out_dir, log=print):
    p, c = cfg["preprocess"], cfg["classifier"]
    net_cfg = C.NetConfig(T=p["T"], fcnn_filters=c["fcnn_filters"],
                          res_blocks=c["res_blocks"],
                          inception_channels=c["inception_channels"],
                          gru_hidden=c["gru_hidden"],
                          init_scheme=c["init_scheme"],
                          seed=cfg["run"]["seed"])
    train_cfg = C.TrainConfig(lr=c["lr"], epsilon=c["epsilon"], batch=c["batch"],
                              patience=c["patience"], l2_lambda=c["l2_lambda"],
                              monitor=c["monitor"], seed=cfg["run"]["seed"],
                              max_epochs=c["max_epochs"])
    net = C.build(net_cfg)
    with _Stage("train", log) as st:
        train_pool = [_subsample(d, p["train_stride"])
                      for _, d in sorted(split_result.train.items())]
        val_pool = [d for _, d in sorted(split_result.val.items())]
        fit = C.train(net, train_pool, val_pool, train_cfg)
        st.done(f"params={net.n_parameters()} best {train_cfg.monitor}="
                f"{fit.best_metric:.4f} at epoch {fit.best_epoch}/{len(fit.history)}")
    ckpt_path = Path(out_dir) / "classifier.dfck"
    C.save(ckpt_path, net, fit=fit, train_cfg=train_cfg,
           train_assets=split_result.train_assets())
    C.write_history_csv(Path(out_dir) / "history.csv", fit.history)
    return net, fit


def _aligned_predictions(net, datasets, mids, log, tag):
    """Predicted labels per asset on a shared absolute-step grid.

    Returns (assets, steps, labels (n, S), prices (S, n), true (n, S)).
    """
    assets = sorted(datasets)
    grids = [datasets[a].absolute_ends() for a in assets]
    for g in grids[1:]:
        if not np.array_equal(g, grids[0]):
            raise ValueError(f"assets disagree on the {tag} step grid")
    steps = grids[0]
    labels = np.empty((len(assets), len(steps)), dtype=np.int8)
    true = np.empty_like(labels)
    probs = {}
    with _Stage(f"predict-{tag}", log) as st:
        for i, asset in enumerate(assets):
            pred, pr = C.predict(net, datasets[asset])
            labels[i] = pred
            true[i] = datasets[asset].labels
            probs[asset] = pr
        acc = float(np.mean(labels == true))
        st.done(f"{labels.size} predictions, accuracy={acc:.4f}")
    prices = np.stack([mids[a][steps] for a in assets], axis=1)
    return assets, steps, labels, prices, true, probs


def _markowitz_schedule(points, steps, mids_matrix, criterion, window, restarts, seed):
    """Rolling mean-variance weights: one estimate per rebalance decision."""
    r_full = P.returns(mids_matrix)
    weights = []
    for d in points:
        a = int(steps[d])  # absolute step of the decision
        lo = max(a - window, 0)
        tail = r_full[lo:a]
        inputs = P.estimate_inputs(tail, window=window)
        weights.append(P.markowitz(inputs, criterion, restarts=restarts, seed=seed))
    return np.stack(weights)


def run_strategies(cfg, net, split_result, mids, out_dir, log=print):
    """Fit the allocator, build every strategy's schedule, backtest them all."""
    acfg = cfg["allocator"]
    bcfg = cfg["backtest"]
    run_seed = cfg["run"]["seed"]
    for name in bcfg["strategies"]:
        if name not in KNOWN_STRATEGIES:
            raise cfgmod.ConfigError(f"unknown strategy {name!r}; known: {KNOWN_STRATEGIES}")

    assets, val_steps, val_labels, val_prices, _, _ = _aligned_predictions(
        net, split_result.val, mids, log, "val")
    assets_t, test_steps, test_labels, test_prices, test_true, test_probs = \
        _aligned_predictions(net, split_result.test, mids, log, "test")
    if assets != assets_t:
        raise ValueError("validation and test assets differ")

    period = acfg["period"]
    points = P.rebalance_points(test_labels.shape[1], period)
    if len(points) == 0:
        raise ValueError(f"test span too short for rebalance period {period}")
    mids_matrix = np.stack([mids[a] for a in assets], axis=1)

    results, summaries = {}, {}
    with _Stage("backtest", log) as st:
        for name in bcfg["strategies"]:
            if name in LSTM_STRATEGIES:
                alloc = P.AllocatorNet(len(assets), hidden=acfg["hidden"],
                                       seed=run_seed + 1)
                alloc_cfg = P.AllocatorConfig(loss=LSTM_STRATEGIES[name],
                                              lr=acfg["lr"], batch=acfg["batch"],
                                              epochs=acfg["epochs"], period=period,
                                              seed=run_seed + 1)
                P.train_allocator(alloc, val_labels, val_prices, alloc_cfg)
                dec, weights = P.rebalance_weights(alloc, test_labels, period=period)
            elif name in MARKOWITZ_STRATEGIES:
                dec = points
                weights = _markowitz_schedule(points, test_steps, mids_matrix,
                                              MARKOWITZ_STRATEGIES[name],
                                              bcfg["markowitz_window"],
                                              bcfg["markowitz_restarts"],
                                              run_seed + 2)
            else:
                dec = points
                weights = np.tile(P.equal_weight(len(assets)), (len(points), 1))
            res = P.backtest(weights, test_prices, period=period, decisions=dec,
                             recursion=bcfg["recursion"])
            results[name] = res
            summaries[name] = P.portfolio_metrics(res)
            _write_weights_csv(Path(out_dir) / f"weights_{name}.csv", dec, weights, assets)
            _write_values_csv(Path(out_dir) / f"values_{name}.csv", res.values)
        line = " ".join(f"{n}:SR={summaries[n].sharpe:.4f}" for n in sorted(summaries))
        st.done(line)
    return assets, test_steps, test_labels, test_true, test_probs, results, summaries


def _write_weights_csv(path, decisions, weights, assets):
    lines = ["decision_step," + ",".join(f"w_{a}" for a in assets)]
    for d, w in zip(decisions, weights):
        lines.append(f"{int(d)}," + ",".join(f"{v:.10g}" for v in w))
    Path(path).write_text("\n".join(lines) + "\n")


def _write_values_csv(path, values):
    lines = ["step,value"] + [f"{i},{v:.10g}" for i, v in enumerate(values)]
    Path(path).write_text("\n".join(lines) + "\n")


def _write_predictions_csv(path, steps, true, pred, probs):
    lines = ["t_end,true,pred,p_down,p_hold,p_up"]
    for i in range(len(steps)):
        lines.append(f"{int(steps[i])},{int(true[i])},{int(pred[i])},"
                     f"{probs[i, 0]:.6g},{probs[i, 1]:.6g},{probs[i, 2]:.6g}")
    Path(path).write_text("\n".join(lines) + "\n")


def run(cfg, out_dir=None, log=print):
    """The whole chain; returns a machine-readable summary dict."""
    t0 = time.perf_counter()
    out_dir = Path(out_dir or cfg["run"]["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    cfgmod.write_resolved(cfg, out_dir, version=__version__)

    series = load_series(cfg, out_dir, log)
    split_result, mids = build_windows(cfg, series, log)
    net, fit = train_classifier(cfg, split_result, out_dir, log)
    assets, steps, labels, true, probs, results, summaries = run_strategies(
        cfg, net, split_result, mids, out_dir, log)

    k = cfg["preprocess"]["k"]
    reports, confusions = {}, {}
    for i, asset in enumerate(assets):
        cm = M.confusion(true[i], labels[i])
        confusions[(k, asset)] = cm
        reports[(k, asset)] = M.report(cm)
        _write_predictions_csv(out_dir / f"predictions_{asset}.csv",
                               steps, true[i], labels[i], probs[asset])

    M.emit(out_dir, reports=reports, confusions=confusions, summaries=summaries,
           cumlog={name: res.values for name, res in results.items()})

    pooled_true = true.ravel()
    pooled_pred = labels.ravel()
    majority = max(np.mean(pooled_true == c) for c in (-1, 0, 1))
    accuracy = float(np.mean(pooled_true == pooled_pred))
    summary = {
        "version": __version__,
        "assets": assets,
        "k": k,
        "majority_accuracy": float(majority),
        "test_accuracy": accuracy,
        "val_metric": fit.best_metric,
        "sharpe": {name: summaries[name].sharpe for name in summaries},
        "expected_return": {name: summaries[name].expected_return for name in summaries},
        "wall_time_s": time.perf_counter() - t0,
    }
    (out_dir / "pipeline_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    log(f"[pipeline] accuracy={accuracy:.4f} vs majority={majority:.4f}; "
        f"artifacts in {out_dir} ({summary['wall_time_s']:.1f}s)")
    return summary
