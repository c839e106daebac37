"""``spotcheck`` command line: featurize -> fit -> score/eval, plus synth and latent-export.

Exit codes: 0 ok, 2 usage or input error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import math
import sys
import time
from collections import Counter
from pathlib import Path

import numpy as np

from . import evaluate, featurize, hprof, kpca, vae
from .errors import InputError, NumericError, SpotCheckError
from .records import DIRECTION, HIGHER, KPCA, VAE, write_records_csv

log = logging.getLogger("spotcheck")

DEFAULT_CONFIG = {
    "seed": 0,
    "schema": "syscall",
    "detector": KPCA,
    "percentile": 95.0,
    "dataset": None,
    "model": None,
    "out_dir": ".",
    "kpca": {"r": 2, "gamma_min": 0.01, "gamma_max": 0.5, "gamma_count": 25, "folds": 3,
             "preimage_ridge": kpca.DEFAULT_PREIMAGE_RIDGE},
    "vae": {"topology": 3, "epochs": 2000, "batch_size": 128, "lr": 1e-3, "beta1": 0.9,
            "beta2": 0.999, "eps": 1e-8, "L": 128},
}


class UsageError(InputError):
    pass


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    unknown = set(doc) - set(DEFAULT_CONFIG)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return _merge(DEFAULT_CONFIG, doc)


# flag dest -> config path
_FLAG_MAP = {
    "seed": ("seed",),
    "out_dir": ("out_dir",),
    "schema": ("schema",),
    "detector": ("detector",),
    "percentile": ("percentile",),
    "dataset": ("dataset",),
    "model": ("model",),
    "r": ("kpca", "r"),
    "gamma_min": ("kpca", "gamma_min"),
    "gamma_max": ("kpca", "gamma_max"),
    "gamma_count": ("kpca", "gamma_count"),
    "folds": ("kpca", "folds"),
    "preimage_ridge": ("kpca", "preimage_ridge"),
    "topology": ("vae", "topology"),
    "epochs": ("vae", "epochs"),
    "batch_size": ("vae", "batch_size"),
    "lr": ("vae", "lr"),
    "samples": ("vae", "L"),
}


def effective_config(args) -> dict:
    cfg = load_config(args.config)
    for dest, path in _FLAG_MAP.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        node = cfg
        for key in path[:-1]:
            node = node[key]
        node[path[-1]] = value
    if cfg["detector"] not in (KPCA, VAE):
        raise UsageError(f"detector must be {KPCA!r} or {VAE!r}")
    return cfg


def _digest(path) -> str:
    h = hashlib.sha256()
    p = Path(path)
    files = sorted(f for f in p.rglob("*") if f.is_file()) if p.is_dir() else [p]
    for f in files:
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def _config_hash(cfg: dict) -> str:
    keep = {k: cfg[k] for k in ("seed", "detector", "percentile")}
    keep[cfg["detector"]] = cfg[cfg["detector"]]
    return hashlib.sha256(json.dumps(keep, sort_keys=True).encode()).hexdigest()[:16]


def _write_manifest(out_dir: Path, command: str, cfg: dict, inputs: dict, outputs: list, started: float) -> None:
    doc = {
        "command": command,
        "config": cfg,
        "config_hash": _config_hash(cfg),
        "seed": cfg["seed"],
        "inputs": {k: {"path": str(v), "sha256": _digest(v)} for k, v in inputs.items() if v is not None},
        "outputs": [str(p) for p in outputs],
        "wall_time_s": round(time.time() - started, 3),
    }
    with open(out_dir / f"manifest-{command}.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _out_dir(cfg) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path, what):
    if path is None:
        raise UsageError(f"no {what} given")
    if not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


# -- featurize ---------------------------------------------------------------

def _hprof_histograms(directory: Path, schema, label):
    files = sorted(p for p in directory.iterdir() if p.is_file() and p.suffix == ".hprof")
    merged: dict[str, featurize.RawHistogram] = {}
    for f in files:
        # "<app>#<n>.hprof" are extra dumps of the same app
        app = f.stem.split("#", 1)[0]
        with open(f, "rb") as fh:
            try:
                summary = hprof.parse_hprof(fh)
            except InputError as exc:
                raise InputError(f"{f}: {exc}") from None
        h = hprof.summary_to_histogram(summary, schema, app, label)
        merged[app] = merged[app].merged(h) if app in merged else h
    return [merged[k] for k in sorted(merged)]


def _trace_histograms(path: Path, schema, label):
    with open(path, encoding="utf-8") as fh:
        try:
            return featurize.parse_trace_log(fh, schema, label)
        except InputError as exc:
            raise InputError(f"{path}: {exc}") from None


def cmd_featurize(args, cfg):
    schema = featurize.load_schema(cfg["schema"])
    sources = [(p, featurize.BENIGN) for p in args.benign or []] + [(p, featurize.MALICIOUS) for p in args.malicious or []]
    if not sources:
        raise UsageError("no inputs")
    hists = []
    for path, label in sources:
        path = _require(path, "input")
        if path.is_dir():
            if schema.kind != featurize.HPROF:
                raise UsageError(f"{path} is a directory of HPROF dumps but the schema kind is {schema.kind!r}")
            found = _hprof_histograms(path, schema, label)
        else:
            found = _trace_histograms(path, schema, label)
        hists += found
    if not hists:
        raise UsageError("no inputs")
    unknown = sum((h.unknown for h in hists), start=Counter())
    empty = [h.app_id for h in hists if sum(h.counts.values()) == 0]
    if empty:
        log.warning("dropping %d apps with no in-schema counts: %s", len(empty), ", ".join(empty[:5]))
        hists = [h for h in hists if sum(h.counts.values()) > 0]
    rows = [featurize.l1_scale(h, schema) for h in hists]
    if args.split:
        dataset = featurize.split_dataset(rows, schema, tuple(args.ratios), cfg["seed"])
    else:
        dataset = featurize.Dataset(schema, rows, [featurize.UNSPLIT] * len(rows))
    out = Path(args.output) if args.output else _out_dir(cfg) / "dataset.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    featurize.write_dataset_csv(dataset, out)
    print(f"wrote {out}: {len(rows)} rows x {schema.dim} features")
    if unknown:
        top = ", ".join(f"{k}={v}" for k, v in unknown.most_common(10))
        print(f"out-of-schema features ({sum(unknown.values())} events): {top}")
    return [out]


def cmd_synth(args, cfg):
    ds = featurize.gen_synth(args.dim, args.n_benign, args.n_anom, args.delta, cfg["seed"], tuple(args.ratios))
    out = Path(args.output) if args.output else _out_dir(cfg) / "dataset.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    featurize.write_dataset_csv(ds, out)
    counts = {t: ds.split_tags.count(t) for t in ("train", "val", "test")}
    print(f"wrote {out}: {len(ds)} rows x {ds.schema.dim} features, splits {counts}")
    return [out]


# -- fit / score / eval --------------------------------------------------------

def _read_dataset(cfg):
    return featurize.read_dataset_csv(_require(cfg["dataset"], "dataset"))


def _kpca_grid(cfg):
    k = cfg["kpca"]
    return kpca.default_grid(k["gamma_min"], k["gamma_max"], int(k["gamma_count"]))


def cmd_fit(args, cfg):
    ds = _read_dataset(cfg)
    X = ds.matrix(featurize.TRAIN)
    Xv = ds.matrix(featurize.VAL)
    if len(X) == 0:
        raise UsageError("dataset has no train rows; run featurize with --split")
    out_dir = _out_dir(cfg)
    model_path = Path(cfg["model"]) if cfg["model"] else out_dir / "model.json"
    outputs = [model_path]
    meta = {"config_hash": _config_hash(cfg), "seed": cfg["seed"], "features": list(ds.schema.names)}
    if cfg["detector"] == KPCA:
        k = cfg["kpca"]
        model = kpca.fit_kpca(X, r=int(k["r"]), grid=_kpca_grid(cfg), folds=int(k["folds"]),
                              seed=cfg["seed"], lambda_p=float(k["preimage_ridge"]))
        model.meta.update(meta)
        kpca.save(model, model_path)
        print(f"kpca: gamma={model.gamma:.6g} r={model.r} eigenvalues={np.round(model.lambda_r, 6).tolist()}")
    else:
        v = cfg["vae"]
        topo = vae.preset_topology(int(v["topology"]), ds.schema.dim)
        tc = vae.TrainConfig(epochs=int(v["epochs"]), batch_size=int(v["batch_size"]), lr=float(v["lr"]),
                             beta1=float(v["beta1"]), beta2=float(v["beta2"]), eps=float(v["eps"]), seed=cfg["seed"])
        log_path = out_dir / "train_log.csv"
        try:
            model, hist = vae.train_vae(X, Xv, topo, tc)
        except NumericError as exc:
            if getattr(exc, "history", None) is not None:
                exc.history.write_csv(log_path)
            raise
        model.meta.update(meta)
        model.meta["topology_id"] = int(v["topology"])
        vae.save(model, model_path)
        hist.write_csv(log_path)
        outputs.append(log_path)
        if not args.no_figures:
            from . import plotting
            fig = out_dir / "train_loss.png"
            plotting.plot_history(hist.train_loss, hist.val_loss, fig)
            outputs.append(fig)
        print(f"vae: topology {v['topology']} latent_dim={topo.latent_dim} final train loss {hist.train_loss[-1]:.6g}")
    print(f"wrote {model_path}")
    return outputs


def load_model(path):
    path = _require(path, "model")
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except ValueError as exc:
        raise UsageError(f"{path}: not JSON ({exc})") from None
    fmt = doc.get("format")
    if fmt == kpca.FORMAT:
        return kpca.from_json(doc)
    if fmt == vae.FORMAT:
        return vae.from_json(doc)
    raise UsageError(f"{path}: unknown model format {fmt!r}")


def _detector(model):
    return KPCA if isinstance(model, kpca.KpcaModel) else VAE


def _n_features(model):
    return model.n_features if isinstance(model, kpca.KpcaModel) else model.topology.input_dim


def _score_rows(model, rows, alpha, cfg):
    if isinstance(model, kpca.KpcaModel):
        return kpca.kpca_score(model, rows, alpha)
    return vae.vae_score(model, rows, alpha, seed=cfg["seed"], L=int(cfg["vae"]["L"]))


def _parse_alpha(text):
    try:
        value = float(text)
    except ValueError:
        raise UsageError(f"bad --alpha {text!r}") from None
    if math.isnan(value):
        raise UsageError("--alpha must not be NaN")
    return value


def _score(args, cfg):
    model = load_model(cfg["model"])
    ds = _read_dataset(cfg)
    if _n_features(model) != ds.schema.dim:
        raise UsageError(f"model expects {_n_features(model)} features, dataset has {ds.schema.dim}")
    det = _detector(model)
    direction = DIRECTION[det]
    if args.alpha is not None:
        alpha = _parse_alpha(args.alpha)
    else:
        val = ds.select(featurize.VAL)
        if not val:
            raise UsageError("dataset has no validation rows to calibrate the threshold; pass --alpha")
        val_scores = [r.score for r in _score_rows(model, val, math.inf if direction == HIGHER else -math.inf, cfg)]
        alpha = evaluate.select_threshold(val_scores, float(cfg["percentile"]), direction)
    tags = (featurize.TEST,) if args.split == "test" else featurize.SPLITS
    rows = ds.select(*tags)
    records = _score_rows(model, rows, alpha, cfg)
    return model, ds, rows, records, alpha, direction


def cmd_score(args, cfg):
    _, _, _, records, alpha, _ = _score(args, cfg)
    out = _out_dir(cfg) / "records.csv"
    write_records_csv(records, out)
    n_anom = sum(r.verdict == "anomaly" for r in records)
    print(f"alpha={alpha:.10g}: {n_anom}/{len(records)} flagged; wrote {out}")
    return [out]


def cmd_eval(args, cfg):
    model, ds, rows, records, alpha, direction = _score(args, cfg)
    out_dir = _out_dir(cfg)
    labels = [r.label for r in rows]
    report = evaluate.prf1(records, labels, alpha, direction)
    rec_path = out_dir / "records.csv"
    rep_path = out_dir / "report.json"
    write_records_csv(records, rec_path)
    evaluate.write_report(report, rep_path, {"percentile": cfg["percentile"], "n_rows": len(rows)})
    outputs = [rec_path, rep_path]
    latent = None
    if model.latent_dim == 2:
        latent = evaluate.export_latent(model, ds, (featurize.TEST,) if args.split == "test" else None)
        if args.latent_out:
            evaluate.write_latent_csv(latent, args.latent_out)
            outputs.append(Path(args.latent_out))
    elif args.latent_out:
        raise UsageError(f"--latent-out needs a 2-D latent space, model has {model.latent_dim}")
    if not args.no_figures:
        from . import plotting
        det = _detector(model)
        scores = [r.score for r in records]
        if report.auc_roc is not None:
            plotting.plot_roc(scores, [l == featurize.MALICIOUS for l in labels], direction, report.auc_roc,
                              out_dir / "roc.png", title=det.upper())
            outputs.append(out_dir / "roc.png")
        xlabel = "reconstruction MSE" if det == KPCA else "log reconstruction probability"
        plotting.plot_scores(scores, labels, alpha, out_dir / "scores.png", xlabel)
        outputs.append(out_dir / "scores.png")
        if latent is not None:
            plotting.plot_latent(latent, out_dir / "latent.png", title=f"{det.upper()} latent space")
            outputs.append(out_dir / "latent.png")
    auc = "n/a" if report.auc_roc is None else f"{report.auc_roc:.4f}"
    print(f"auc_roc={auc} f1={report.f1:.4f} precision={report.precision:.4f} recall={report.recall:.4f} "
          f"confusion={report.confusion} alpha={alpha:.10g}")
    return outputs


def cmd_latent_export(args, cfg):
    model = load_model(cfg["model"])
    ds = _read_dataset(cfg)
    if _n_features(model) != ds.schema.dim:
        raise UsageError(f"model expects {_n_features(model)} features, dataset has {ds.schema.dim}")
    table = evaluate.export_latent(model, ds)
    out = Path(args.output) if args.output else _out_dir(cfg) / "latent.csv"
    evaluate.write_latent_csv(table, out)
    outputs = [out]
    if args.figure:
        from . import plotting
        plotting.plot_latent(table, args.figure)
        outputs.append(Path(args.figure))
    print(f"wrote {out}: {len(table)} rows")
    return outputs


# -- parser ---------------------------------------------------------------------

def _common(p, suppress: bool):
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=default, help="JSON run config; flags override it")
    p.add_argument("--seed", type=int, default=default)
    p.add_argument("--out-dir", dest="out_dir", default=default)
    p.add_argument("--print-config", action="store_true", default=argparse.SUPPRESS if suppress else False,
                   help="print the effective merged config and exit")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spotcheck", description=__doc__.splitlines()[0])
    _common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _common(common, suppress=True)

    p = sub.add_parser("featurize", parents=[common], help="trace logs / HPROF dirs -> dataset CSV")
    p.add_argument("--benign", action="append", metavar="PATH")
    p.add_argument("--malicious", action="append", metavar="PATH")
    p.add_argument("--schema", help="schema JSON file, or 'syscall' / 'hprof' for the bundled defaults")
    p.add_argument("--split", action="store_true", help="assign train/val/test tags")
    p.add_argument("--ratios", type=float, nargs=3, default=(0.70, 0.15, 0.15))
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("synth", parents=[common], help="synthetic Dirichlet dataset CSV")
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--n-benign", type=int, default=400)
    p.add_argument("--n-anom", type=int, default=100)
    p.add_argument("--delta", type=float, default=1.0)
    p.add_argument("--ratios", type=float, nargs=3, default=(0.70, 0.15, 0.15))
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", parents=[common], help="train a detector on the train split")
    p.add_argument("--dataset")
    p.add_argument("--detector", choices=(KPCA, VAE))
    p.add_argument("--model", help="output model path (default OUT_DIR/model.json)")
    p.add_argument("--r", type=int)
    p.add_argument("--gamma-min", type=float)
    p.add_argument("--gamma-max", type=float)
    p.add_argument("--gamma-count", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--preimage-ridge", type=float)
    p.add_argument("--topology", type=int, choices=range(1, 7))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_fit)

    for name, func, helptext in (("score", cmd_score, "per-row anomaly records"),
                                 ("eval", cmd_eval, "records + metrics report + figures")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--dataset")
        p.add_argument("--model")
        p.add_argument("--alpha", help="fixed threshold (e.g. +inf); default: validation percentile")
        p.add_argument("--percentile", type=float)
        p.add_argument("--samples", type=int, help="VAE latent samples per point (L)")
        p.add_argument("--split", choices=("test", "all"), default="test")
        if name == "eval":
            p.add_argument("--latent-out")
            p.add_argument("--no-figures", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("latent-export", parents=[common], help="2-D latent coordinates CSV")
    p.add_argument("--dataset")
    p.add_argument("--model")
    p.add_argument("-o", "--output")
    p.add_argument("--figure", help="also render a scatter plot to this path")
    p.set_defaults(func=cmd_latent_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        cfg = effective_config(args)
        if args.print_config:
            json.dump(cfg, sys.stdout, indent=2, sort_keys=True)
            sys.stdout.write("\n")
            return 0
        outputs = args.func(args, cfg)
        inputs = {"dataset": cfg.get("dataset"), "model": cfg.get("model") if args.command != "fit" else None,
                  "config": args.config}
        for i, p in enumerate((getattr(args, "benign", None) or []) + (getattr(args, "malicious", None) or [])):
            inputs[f"input{i}"] = p
        # an explicit -o path keeps its manifest beside it instead of in the default out dir
        explicit = getattr(args, "output", None)
        manifest_dir = Path(explicit).parent if explicit else _out_dir(cfg)
        _write_manifest(manifest_dir, args.command, cfg, inputs, outputs, started)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SpotCheckError as exc:  # pragma: no cover - every subclass is handled above
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
