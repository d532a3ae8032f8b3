"""``mtm`` command line: synth, train, eval, gradcheck, dump-attention, compare.

Exit codes: 0 ok, 2 configuration, 3 data, 4 numeric.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from mtm.data import (SplitSpec, SynthSpec, cooccurrence_histogram, dump_ndjson, load_ndjson,
                      mask_channels, split, standardize, synth_generate)
from mtm.errors import ConfigError, DataError, MtmError
from mtm.metrics import MetricsReport, TestError, format_mean_std, welch_ttest
from mtm.model import ModelConfig, batch_from_series, check_gradients, forward, toy_batch
from mtm.train import Checkpoint, evaluate, train

log = logging.getLogger("mtm")

ABLATIONS = {
    "no-pooling": {"pooling": False},
    "no-cls": {"cls": False},
    "no-mixing": {"mixing": False},
    "no-channel-attn": {"channel_attention": False},
    "channel-attn-mlp": {"channel_attention_as_mlp": True},
}

RUN_KEYS = {"data", "mask_ratio", "split"}
SYNTH_FIELDS = {f.name for f in dataclasses.fields(SynthSpec)}
MODEL_FIELDS = {f.name for f in dataclasses.fields(ModelConfig)}


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _outdir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create output directory {path}: {e}") from None
    return path


def _load_config(args, allowed):
    cfg = _read_json(args.config) if getattr(args, "config", None) else {}
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = set(cfg) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return cfg


def _load_data(path):
    try:
        data = load_ndjson(path)
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None
    if not data:
        raise DataError(f"{path}: dataset is empty")
    return data


# synth ------------------------------------------------------------------------------

def cmd_synth(args):
    cfg = _load_config(args, SYNTH_FIELDS)
    for key, flag in (("n_channels", args.channels), ("n_samples", args.samples), ("alpha", args.alpha),
                      ("events_per_channel", args.events), ("cycles", args.cycles),
                      ("noise", args.noise), ("seed", args.seed)):
        if flag is not None:
            cfg[key] = flag
    spec = SynthSpec(**cfg)
    try:
        spec.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    out = _outdir(args.out)
    data = synth_generate(spec)
    dump_ndjson(data, os.path.join(out, "dataset.ndjson"))
    hist = cooccurrence_histogram(data)
    manifest = {
        "seed": spec.seed,
        "spec": dataclasses.asdict(spec),
        "n_samples": len(data),
        "label_counts": np.bincount([s.label for s in data], minlength=2).tolist(),
        "cooccurrence_histogram": hist.tolist(),
        "cooccurrence_fraction": (hist / max(hist.sum(), 1)).tolist(),
    }
    _write_json(os.path.join(out, "manifest.json"), manifest)
    print(json.dumps({"dataset": os.path.join(out, "dataset.ndjson"), "n_samples": len(data)}))
    return 0


# train / eval -----------------------------------------------------------------------

def _train_config(args):
    cfg = _load_config(args, MODEL_FIELDS | RUN_KEYS)
    if args.data:
        cfg["data"] = args.data
    if "data" not in cfg:
        raise ConfigError("no dataset given (--data or 'data' in the config)")
    if args.seed is not None:
        cfg["seed"] = args.seed
    for name in args.ablate or []:
        cfg.update(ABLATIONS[name])
    if args.pooling is not None:
        cfg["pooling_kind"] = args.pooling
    if args.mask_ratio is not None:
        cfg["mask_ratio"] = args.mask_ratio
    if args.rate is not None:
        cfg["rate"] = args.rate
    if args.blocks is not None:
        cfg["n_blocks"] = args.blocks
    if args.epochs is not None:
        cfg["epochs"] = args.epochs
    return cfg


def _mask(data, ratio, seed):
    if not ratio:
        return data
    try:
        out = mask_channels(data, ratio, seed)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if not out:
        raise DataError("channel masking removed every sample")
    return out


def run_train(cfg, out):
    """Split, standardize, train and test according to a run config dict."""
    cfg = dict(cfg)
    data = _load_data(cfg["data"])
    seed = int(cfg.get("seed", 0))
    cfg.setdefault("n_channels", data[0].n_channels)
    cfg.setdefault("n_classes", max(2, max(s.label for s in data) + 1))
    data = _mask(data, float(cfg.get("mask_ratio", 0.0)), seed)
    sp = dict(cfg.get("split", {}))
    sp.setdefault("seed", seed)
    if "fractions" in sp:
        sp["fractions"] = tuple(sp["fractions"])
    try:
        split_spec = SplitSpec(**sp)
        tr, va, te = split(data, split_spec)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad split settings: {e}") from None
    if not tr or not va or not te:
        raise DataError("a split came out empty; the dataset is too small")
    config = ModelConfig.from_dict({k: v for k, v in cfg.items() if k in MODEL_FIELDS})
    if any(s.label >= config.n_classes for s in data):
        raise ConfigError("a label exceeds n_classes")
    norm, tr_n, va_n, te_n = standardize(tr, va, te)
    ckpt, history = train(tr_n, va_n, config, norm)
    report = evaluate(ckpt, te_n)

    cfg["split"] = {**sp, "fractions": list(split_spec.fractions)}
    cfg.update(config.to_dict())
    _outdir(out)
    _write_json(os.path.join(out, "config.json"), cfg)
    ckpt.save(os.path.join(out, "checkpoint.json"))
    _write_json(os.path.join(out, "history.json"), history)
    with open(os.path.join(out, "metrics.json"), "w") as fh:
        fh.write(report.to_json() + "\n")
    dump_ndjson(te, os.path.join(out, "test.ndjson"))
    return report


def cmd_train(args):
    cfg = _train_config(args)
    report = run_train(cfg, args.out)
    print(report.to_json())
    return 0


def cmd_eval(args):
    ckpt = Checkpoint.load(args.checkpoint)
    data = _load_data(args.data)
    data = _mask(data, args.mask_ratio or 0.0, args.seed if args.seed is not None else 0)
    if data[0].n_channels != ckpt.config.n_channels:
        raise ConfigError(f"dataset has {data[0].n_channels} channels, "
                          f"checkpoint expects {ckpt.config.n_channels}")
    if ckpt.normalizer is not None:
        data = ckpt.normalizer.apply(data)
    report = evaluate(ckpt, data)
    text = report.to_json()
    if args.out:
        _outdir(args.out)
        with open(os.path.join(args.out, "metrics.json"), "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


# gradcheck --------------------------------------------------------------------------

def cmd_gradcheck(args):
    cfg = {"n_channels": 2, "d_model": 8, "n_blocks": 1, "dropout": 0.0}
    cfg.update(_load_config(args, MODEL_FIELDS))
    for name in args.ablate or []:
        cfg.update(ABLATIONS[name])
    if args.seed is not None:
        cfg["seed"] = args.seed
    config = ModelConfig.from_dict(cfg)
    batch = toy_batch(config.n_channels, events=3, seed=config.seed)
    report = check_gradients(config, batch, rtol=args.rtol, max_elements=args.max_elements)
    out = report.to_dict()
    out["config"] = config.to_dict()
    text = json.dumps(out, indent=2, sort_keys=True)
    if args.out:
        _outdir(args.out)
        with open(os.path.join(args.out, "gradcheck.json"), "w") as fh:
            fh.write(text + "\n")
    print(text)
    if not report.passed:
        print("gradient check failed for: " + ", ".join(report.failures), file=sys.stderr)
        return 4
    return 0


# dump-attention ---------------------------------------------------------------------

def _tolist(a):
    return np.asarray(a).tolist()


def dump_attention(ckpt, series):
    """Per-layer attention maps, pivotal choices and masks for one sample."""
    s = ckpt.normalizer.apply([series])[0] if ckpt.normalizer is not None else series
    batch = batch_from_series([s])
    record = {}
    forward(batch, ckpt.params, ckpt.config, train=False, record=record)
    layers = []
    for n in range(ckpt.config.n_blocks + 1):
        rec = record[f"layer{n}"]
        k = int(rec["n_times"][0])
        entry = {
            "layer": n,
            "n_times": k,
            "times": _tolist(rec["times"][0, :k]),
            "observed": _tolist(rec["observed"][0, : k + 1]),
            "cls_weights": _tolist(rec["cls_weights"][0, :k]),
            "temporal": _tolist(rec["temporal"][0, :, : k + 1, : k + 1]),
        }
        if "pivot" in rec:
            entry["pivot"] = _tolist(rec["pivot"][0, :k])
        if "mixing" in rec:
            entry["mixing"] = _tolist(rec["mixing"][0, :, : k + 1, : k + 1])
        if "channel" in rec:
            entry["channel"] = _tolist(rec["channel"][0, : k + 1])
        layers.append(entry)
    return {"sample_id": series.id, "label": series.label, "n_channels": series.n_channels,
            "layers": layers}


def cmd_dump_attention(args):
    ckpt = Checkpoint.load(args.checkpoint)
    data = _load_data(args.data)
    found = [s for s in data if s.id == args.sample_id]
    if not found:
        raise DataError(f"no sample with id {args.sample_id!r}")
    if found[0].n_channels != ckpt.config.n_channels:
        raise ConfigError("sample channel count does not match the checkpoint")
    text = json.dumps(dump_attention(ckpt, found[0]))
    if args.out:
        _outdir(args.out)
        with open(os.path.join(args.out, f"attention_{args.sample_id}.json"), "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


# compare ----------------------------------------------------------------------------

def _metric_values(paths, metric):
    vals = []
    for p in paths:
        d = _read_json(p)
        if metric not in d or d[metric] is None:
            raise ConfigError(f"{p}: no metric {metric!r}")
        vals.append(float(d[metric]))
    return vals


def compare(a_paths, b_paths, metric="accuracy"):
    a = _metric_values(a_paths, metric)
    b = _metric_values(b_paths, metric)
    try:
        res = welch_ttest(a, b)
    except TestError as e:
        raise ConfigError(str(e)) from None
    return {
        "metric": metric,
        "a": format_mean_std(a), "b": format_mean_std(b),
        "mean_a": float(np.mean(a)), "mean_b": float(np.mean(b)),
        "t": res.t, "df": res.df, "p_value": res.p_value,
    }


def cmd_compare(args):
    out = compare(args.a, args.b, args.metric)
    print(f"{args.metric}: A {out['a']}  B {out['b']}  p = {out['p_value']:.4g}")
    print(json.dumps(out, sort_keys=True))
    if args.out:
        _outdir(args.out)
        _write_json(os.path.join(args.out, "compare.json"), out)
    return 0


# entry point ------------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="mtm", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_required=False):
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("synth", help="generate a synthetic asynchronous dataset")
    common(p, out_required=True)
    p.add_argument("--channels", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--events", type=int, help="events per channel")
    p.add_argument("--cycles", type=float)
    p.add_argument("--noise", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="split, standardize, train and test")
    common(p, out_required=True)
    p.add_argument("--data")
    p.add_argument("--ablate", action="append", choices=sorted(ABLATIONS))
    p.add_argument("--pooling", choices=["concat", "max", "avg"])
    p.add_argument("--mask-ratio", type=float)
    p.add_argument("--rate", type=float)
    p.add_argument("--blocks", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mask-ratio", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    common(p)
    p.add_argument("--ablate", action="append", choices=sorted(ABLATIONS))
    p.add_argument("--rtol", type=float, default=1e-4)
    p.add_argument("--max-elements", type=int, help="probe at most this many entries per tensor")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-attention", help="attention maps of one sample as JSON")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sample-id", required=True)
    p.set_defaults(func=cmd_dump_attention)

    p = sub.add_parser("compare", help="Welch t-test between two sets of metric files")
    p.add_argument("--a", nargs="+", required=True)
    p.add_argument("--b", nargs="+", required=True)
    p.add_argument("--metric", default="accuracy")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MtmError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except (TypeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
