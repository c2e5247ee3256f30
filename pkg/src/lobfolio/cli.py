"""Command-line front end.

Subcommands: demo-data, ingest, preprocess, train, predict, backtest,
report, pipeline. Exit codes: 0 success, 1 stage failure, 2 usage errors.
Heavy imports happen inside the handlers so that --threads can cap the
BLAS pools before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


def _cap_threads(argv):
    if "--threads" in argv:
        n = argv[argv.index("--threads") + 1]
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, n)


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="lobfolio",
        description="Book-data trend classification and label-driven portfolios")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("demo-data", help="generate seeded synthetic book CSVs")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=10_000)
    p.add_argument("--assets", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=int, default=300)
    p.add_argument("--gap-rate", type=float, default=0.005)

    p = sub.add_parser("ingest", help="parse/validate book files (or poll a depth feed)")
    p.add_argument("--format", choices=("snapshot", "fi2010"), default="snapshot")
    p.add_argument("--in", dest="inp")
    p.add_argument("--out", required=True)
    p.add_argument("--impute", choices=("locf", "mean", "none"), default="locf")
    p.add_argument("--resolution", type=int, default=300)
    p.add_argument("--poll", metavar="URL", help="depth endpoint template with {symbol}/{levels}")
    p.add_argument("--symbol")
    p.add_argument("--interval", type=float, default=300.0)
    p.add_argument("--count", type=int, default=1)

    p = sub.add_parser("preprocess", help="normalize, label, and window book series")
    p.add_argument("--in", dest="inp", required=True, help="comma-separated snapshot CSVs")
    p.add_argument("--assets", help="comma-separated names (default: file stems)")
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--alpha", type=float, default=0.001)
    p.add_argument("--variant", choices=("mm", "pt"), default="mm")
    p.add_argument("--T", type=int, default=100)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--window-days", type=int, default=5)
    p.add_argument("--split", default="70,15,15")
    p.add_argument("--mode", choices=("per-asset", "combined", "holdout"), default="per-asset")
    p.add_argument("--holdout", default="")
    p.add_argument("--resolution", type=int, default=300)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train the trend classifier on preprocessed windows")
    p.add_argument("--data", required=True, help="directory written by preprocess")
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--eps", type=float, default=1.0)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--l2", type=float, default=1e-4)
    p.add_argument("--monitor", choices=("acc", "wf1"), default="acc")
    p.add_argument("--max-epochs", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fcnn-filters", type=int, default=16)
    p.add_argument("--res-blocks", type=int, default=2)
    p.add_argument("--inception-channels", type=int, default=32)
    p.add_argument("--gru-hidden", type=int, default=64)
    p.add_argument("--init-scheme", choices=("glorot", "he"), default="glorot")
    p.add_argument("--out", required=True, help="checkpoint path (.dfck)")

    p = sub.add_parser("predict", help="emit labels/probabilities from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="directory written by preprocess")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("backtest", help="backtest a strategy on label/price streams")
    p.add_argument("--labels", required=True, help="CSV: step,<asset columns> in {-1,0,1}")
    p.add_argument("--prices", required=True, help="CSV: step,<asset columns>, positive")
    p.add_argument("--strategy", required=True,
                   choices=("lstm-sr", "lstm-mv", "markowitz-sr", "markowitz-mv", "equal"))
    p.add_argument("--period", type=int, default=10)
    p.add_argument("--fit-frac", type=float, default=0.5,
                   help="leading fraction reserved for fitting learned strategies")
    p.add_argument("--markowitz-window", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="re-emit summary.csv and cumlog.svg from values files")
    p.add_argument("--in", dest="inp", required=True, help="directory with values_*.csv")
    p.add_argument("--period", type=int, default=10)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pipeline", help="run the full chain from one config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out")
    return parser


# -- handlers ---------------------------------------------------------------------


def _cmd_demo_data(args):
    from .demo import DemoConfig, write_demo_csvs
    cfg = DemoConfig(steps=args.steps, n_assets=args.assets, seed=args.seed,
                     resolution=args.resolution, gap_rate=args.gap_rate)
    paths = write_demo_csvs(cfg, args.out)
    for asset, path in sorted(paths.items()):
        print(f"[demo-data] {asset}: {path}")
    return 0


def _cmd_ingest(args):
    from . import ingest
    if args.poll:
        import time as _time
        if not args.symbol:
            print("error: --poll requires --symbol", file=sys.stderr)
            return 2
        with open(args.out, "a") as fh:
            for i in range(args.count):
                snap = ingest.fetch_depth(args.poll, args.symbol)
                cells = [str(snap.timestamp)] + [f"{v:.17g}" for v in snap.to_row()]
                fh.write(",".join(cells) + "\n")
                print(f"[ingest] polled {args.symbol} @ {snap.timestamp}")
                if i + 1 < args.count:
                    _time.sleep(args.interval)
        return 0
    if not args.inp:
        print("error: --in is required without --poll", file=sys.stderr)
        return 2
    with open(args.inp, "rb") as fh:
        if args.format == "fi2010":
            fm = ingest.parse_fi2010(fh)
            import numpy as np
            rows = np.hstack([fm.features, fm.labels.astype(np.float64)])
            with open(args.out, "w") as out:
                for row in rows:
                    out.write(",".join(f"{v:.17g}" for v in row) + "\n")
            print(f"[ingest] {len(rows)} samples -> {args.out}")
            return 0
        series = ingest.parse_snapshot_csv(fh, resolution=args.resolution)
    n_missing = series.n_missing
    if args.impute == "locf":
        series = ingest.impute_locf(series)
    elif args.impute == "mean":
        series = ingest.impute_mean(series)
    with open(args.out, "w") as out:
        ingest.serialize_snapshot_csv(series, out)
    print(f"[ingest] {len(series)} slots ({n_missing} imputed) -> {args.out}")
    return 0


def _cmd_preprocess(args):
    import numpy as np
    from . import ingest
    from . import preprocess as pp
    paths = [Path(s) for s in args.inp.split(",")]
    assets = args.assets.split(",") if args.assets else [p.stem for p in paths]
    if len(assets) != len(paths):
        print("error: --assets count must match --in count", file=sys.stderr)
        return 2
    fractions = tuple(float(x) / 100.0 if float(x) > 1 else float(x)
                      for x in args.split.split(","))
    cfg = pp.LabelingConfig(k=args.k, alpha=args.alpha, variant=args.variant)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    datasets = {}
    meta = {"assets": assets, "k": args.k, "T": args.T, "stride": args.stride,
            "variant": args.variant, "alpha": args.alpha, "splits": {}}
    for asset, path in zip(assets, paths):
        with open(path, "rb") as fh:
            series = ingest.impute_locf(
                ingest.parse_snapshot_csv(fh, resolution=args.resolution))
        mids = pp.mid_price_series(series)
        ds, _, _ = pp.windows_from_series(series.features(),
                                          pp.day_ids(series.timestamps()),
                                          mids, cfg, args.T, stride=args.stride,
                                          window_days=args.window_days, asset=asset)
        datasets[asset] = ds
        np.savetxt(out / f"prices_{asset}.csv",
                   np.column_stack([np.arange(len(mids)), mids]),
                   fmt=("%d", "%.17g"), delimiter=",", header="step,mid", comments="")
    result = pp.split(datasets, pp.SplitSpec(fractions=fractions, mode=args.mode,
                                             holdout=args.holdout))
    for split_name, part in (("train", result.train), ("val", result.val),
                             ("test", result.test)):
        for asset, ds in part.items():
            pp.write_dfwd(out / f"{split_name}_{asset}.dfwd", ds)
            meta["splits"][f"{split_name}_{asset}"] = {
                "n": len(ds), "offset": int(ds.offset),
                "first_end": int(ds.ends[0]) if len(ds) else -1}
    (out / "dataset_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    total = sum(len(d) for d in datasets.values())
    print(f"[preprocess] {total} windows across {len(assets)} assets -> {out}")
    return 0


def _load_dfwd_dir(data_dir, split, assets):
    from . import preprocess as pp
    datasets = {}
    for asset in assets:
        path = Path(data_dir) / f"{split}_{asset}.dfwd"
        if not path.exists():
            continue
        windows, labels = pp.read_dfwd(path)
        datasets[asset] = _DenseWindows(windows, labels, asset)
    return datasets


class _DenseWindows:
    """Materialized windows with the same batching surface as WindowDataset."""

    def __init__(self, windows, labels, asset=""):
        self.windows = windows
        self.labels = labels
        self.asset = asset
        self.T = windows.shape[1] if len(windows) else 0

    def __len__(self):
        return len(self.windows)

    def batch(self, indices):
        import numpy as np
        idx = np.asarray(indices)
        return self.windows[idx][:, None, :, :], self.labels[idx].astype(np.int64)


def _cmd_train(args):
    from . import classifier as C
    meta = json.loads((Path(args.data) / "dataset_meta.json").read_text())
    train_sets = _load_dfwd_dir(args.data, "train", meta["assets"])
    val_sets = _load_dfwd_dir(args.data, "val", meta["assets"])
    if not train_sets or not val_sets:
        print("error: no train/val windows found", file=sys.stderr)
        return 1
    net_cfg = C.NetConfig(T=meta["T"], fcnn_filters=args.fcnn_filters,
                          res_blocks=args.res_blocks,
                          inception_channels=args.inception_channels,
                          gru_hidden=args.gru_hidden,
                          init_scheme=args.init_scheme, seed=args.seed)
    train_cfg = C.TrainConfig(lr=args.lr, epsilon=args.eps, batch=args.batch,
                              patience=args.patience, l2_lambda=args.l2,
                              monitor="accuracy" if args.monitor == "acc" else "weighted_f1",
                              seed=args.seed, max_epochs=args.max_epochs)
    net = C.build(net_cfg)
    print(f"[train] net has {net.n_parameters()} parameters")
    fit = C.train(net, [train_sets[a] for a in sorted(train_sets)],
                  [val_sets[a] for a in sorted(val_sets)], train_cfg)
    C.save(args.out, net, fit=fit, train_cfg=train_cfg,
           train_assets=sorted(train_sets))
    C.write_history_csv(str(Path(args.out).with_suffix(".history.csv")), fit.history)
    print(f"[train] best {train_cfg.monitor}={fit.best_metric:.4f} "
          f"at epoch {fit.best_epoch} -> {args.out}")
    return 0


def _cmd_predict(args):
    import numpy as np
    from . import classifier as C
    net, _ = C.load(args.ckpt)
    meta = json.loads((Path(args.data) / "dataset_meta.json").read_text())
    datasets = _load_dfwd_dir(args.data, args.split, meta["assets"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for asset, ds in sorted(datasets.items()):
        pred, probs = C.predict(net, ds.windows)
        lines = ["index,true,pred,p_down,p_hold,p_up"]
        for i in range(len(pred)):
            lines.append(f"{i},{int(ds.labels[i])},{int(pred[i])},"
                         f"{probs[i, 0]:.6g},{probs[i, 1]:.6g},{probs[i, 2]:.6g}")
        (out / f"predictions_{asset}.csv").write_text("\n".join(lines) + "\n")
        acc = float(np.mean(pred == ds.labels))
        print(f"[predict] {asset}: {len(pred)} windows, accuracy={acc:.4f}")
    return 0


def _read_matrix_csv(path):
    import numpy as np
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    return header[1:], data[:, 1:]


def _cmd_backtest(args):
    import numpy as np
    from . import metrics as M
    from . import portfolio as P
    assets, labels = _read_matrix_csv(args.labels)
    p_assets, prices = _read_matrix_csv(args.prices)
    if assets != p_assets or labels.shape != prices.shape:
        print("error: label and price files disagree on assets/steps", file=sys.stderr)
        return 1
    labels = labels.astype(np.int8).T  # (n_assets, steps)
    n_steps = prices.shape[0]
    fit_end = int(args.fit_frac * n_steps)
    test_labels = labels[:, fit_end:]
    test_prices = prices[fit_end:]
    points = P.rebalance_points(test_labels.shape[1], args.period)
    if len(points) == 0:
        print("error: evaluation span too short for the period", file=sys.stderr)
        return 1
    if args.strategy in ("lstm-sr", "lstm-mv"):
        net = P.AllocatorNet(len(assets), seed=args.seed)
        cfg = P.AllocatorConfig(loss=args.strategy.split("-")[1], period=args.period,
                                seed=args.seed)
        P.train_allocator(net, labels[:, :fit_end], prices[:fit_end], cfg)
        dec, weights = P.rebalance_weights(net, test_labels, period=args.period)
    elif args.strategy.startswith("markowitz"):
        criterion = P.CRITERION_MAX_SR if args.strategy.endswith("sr") else P.CRITERION_MIN_VOL
        r_full = P.returns(prices)
        weights = []
        for d in points:
            a = fit_end + int(d)
            tail = r_full[max(a - args.markowitz_window, 0):a]
            weights.append(P.markowitz(P.estimate_inputs(tail, window=args.markowitz_window),
                                       criterion, seed=args.seed))
        weights = np.stack(weights)
        dec = points
    else:
        weights = np.tile(P.equal_weight(len(assets)), (len(points), 1))
        dec = points
    res = P.backtest(weights, test_prices, period=args.period, decisions=dec)
    summary = P.portfolio_metrics(res)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .pipeline import _write_values_csv, _write_weights_csv
    _write_weights_csv(out / f"weights_{args.strategy}.csv", dec, weights, assets)
    _write_values_csv(out / f"values_{args.strategy}.csv", res.values)
    M.write_summary_csv(out / "summary.csv", {args.strategy: summary})
    print(f"[backtest] {args.strategy}: expected_return={summary.expected_return:.6f} "
          f"sharpe={summary.sharpe:.6f} -> {out}")
    return 0


def _cmd_report(args):
    import numpy as np
    from . import metrics as M
    from . import portfolio as P
    in_dir = Path(args.inp)
    values = {}
    for path in sorted(in_dir.glob("values_*.csv")):
        name = path.stem[len("values_"):]
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        values[name] = data[:, 1]
    if not values:
        M.write_summary_csv(Path(args.out) / "summary.csv", {})
        print("[report] no values files; wrote header-only summary")
        return 0
    summaries = {}
    for name, v in values.items():
        period_values = v[::args.period]
        rp = period_values[1:] / period_values[:-1] - 1.0
        res = P.BacktestResult(values=v, weights=np.zeros((0, 0)),
                               decisions=np.zeros(0, dtype=int), period=args.period,
                               step_returns=v[1:] / v[:-1] - 1.0, period_returns=rp)
        summaries[name] = P.portfolio_metrics(res)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    M.emit(out, summaries=summaries, cumlog=values)
    print(f"[report] {len(values)} strategies -> {out}")
    return 0


def _cmd_pipeline(args):
    from . import config as cfgmod
    from . import pipeline
    cfg = cfgmod.load(args.config)
    if args.seed is not None:
        cfg["run"]["seed"] = args.seed
    if args.threads is not None:
        cfg["run"]["threads"] = args.threads
    pipeline.run(cfg, out_dir=args.out)
    return 0


_HANDLERS = {
    "demo-data": _cmd_demo_data,
    "ingest": _cmd_ingest,
    "preprocess": _cmd_preprocess,
    "train": _cmd_train,
    "predict": _cmd_predict,
    "backtest": _cmd_backtest,
    "report": _cmd_report,
    "pipeline": _cmd_pipeline,
}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    _cap_threads(argv)
    parser = _build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return _HANDLERS[args.command](args)
    except Exception as exc:  # stage failure -> exit 1 with a diagnostic
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
