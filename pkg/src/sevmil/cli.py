"""``sevmil`` command line: gen, train, eval, remix, bench, metrics.

Failures exit nonzero and print ``{"error": {"code": ..., "message": ...}}``
on stderr.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import metrics, synth
from .config import ConfigError, ExperimentConfig, load_config
from .remix import RemixError, random_select, sfr_select, _merge
from .trainer import config_hash, evaluate, load_checkpoint, save_checkpoint, train

log = logging.getLogger("sevmil")

EXIT_CODES = {
    "config-invalid": 3,
    "bag-format": 4,
    "magic-mismatch": 4,
    "truncated-file": 4,
    "trailing-data": 4,
    "unsupported-version": 4,
    "manifest-mismatch": 4,
    "confusion-format": 4,
    "precondition": 5,
    "io": 6,
}


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def canonical(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _emit(text: str, out_path: Path | None) -> None:
    if out_path is not None:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(text)
    sys.stdout.write(text)


def _reports_csv(reports: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["level", "metric", "value"])
    for r in reports:
        for key in ("accuracy", "auc", "ascc", "asmc", "expected_risk", "severe_error_count", "total"):
            if key in r:
                w.writerow([r["level"], key, "" if r[key] is None else r[key]])
        for c, v in enumerate(r.get("expected_error_class", [])):
            w.writerow([r["level"], f"expected_error_class[{c}]", "" if v is None else v])
    return buf.getvalue()


def _config(args) -> ExperimentConfig:
    if not args.config:
        raise CliError("config-invalid", "--config is required")
    return load_config(args.config)


def _seed(args, cfg) -> int:
    return cfg.seed if args.seed is None else args.seed


def _out(args, cfg, sub: str) -> Path:
    return Path(args.out) if args.out else Path(cfg.output_dir) / sub


def cmd_gen(args) -> int:
    cfg = _config(args)
    h = cfg.build_hierarchy()
    spec = cfg.synth_spec(h, seed=_seed(args, cfg), id_prefix=args.prefix)
    try:
        bags = synth.generate(spec, threads=args.threads)
    except ValueError as exc:
        raise CliError("config-invalid", str(exc)) from exc
    path = synth.write_dataset(bags, _out(args, cfg, "data"))
    log.info("wrote %d bags to %s", len(bags), path)
    sys.stdout.write(canonical({"manifest": str(path), "bags": len(bags)}))
    return 0


def _dataset(args, cfg, h):
    manifest = args.data or str(Path(cfg.output_dir) / "data" / "manifest.json")
    if not Path(manifest).exists():
        raise CliError("io", f"manifest {manifest} not found")
    return synth.read_dataset(manifest, h)


def cmd_train(args) -> int:
    cfg = _config(args)
    h = cfg.build_hierarchy()
    bags = _dataset(args, cfg, h)
    tc = cfg.train_config(seed=_seed(args, cfg))
    try:
        model, trace = train(bags, h, tc)
    except ValueError as exc:
        raise CliError("precondition", str(exc)) from exc
    out = _out(args, cfg, "model")
    out.mkdir(parents=True, exist_ok=True)
    digest = config_hash(cfg.canonical_json())
    save_checkpoint(model, out / "checkpoint.milc", digest)
    with open(out / "loss_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "msce", "ha", "remixed", "remix_fallbacks"])
        for s in trace:
            w.writerow([s.epoch, repr(s.loss), "" if s.msce is None else repr(s.msce),
                        "" if s.ha is None else repr(s.ha), s.remixed, s.remix_fallbacks])
    sys.stdout.write(canonical({"checkpoint": str(out / "checkpoint.milc"), "config_hash": digest,
                                "final_loss": trace[-1].loss if trace else None}))
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    h = cfg.build_hierarchy()
    if not args.checkpoint:
        raise CliError("precondition", "--checkpoint is required")
    model, digest = load_checkpoint(args.checkpoint)
    bags = _dataset(args, cfg, h)
    if bags[0].dim != model.dim or len(model.weights) != h.depth:
        raise CliError("precondition", "checkpoint does not match dataset/hierarchy")
    P = cfg.metrics.P if args.P is None else args.P
    reports, cms = evaluate(model, bags, h, P, cfg.metrics.risk_factor, cfg.metrics.literal_indexing)
    out = _out(args, cfg, "eval")
    out.mkdir(parents=True, exist_ok=True)
    for cm in cms:
        metrics.write_confusion_csv(cm, out / f"confusion_level{cm.level}.csv")
    body = [r.to_dict() for r in reports]
    if args.format == "csv":
        _emit(_reports_csv(body), out / "report.csv")
    else:
        _emit(canonical({"checkpoint_config_hash": digest, "P": P, "levels": body}), out / "report.json")
    return 0


def _entry_for(manifest, bag_path):
    target = Path(bag_path).resolve()
    base = Path(manifest).parent
    for e in synth.load_manifest(manifest):
        if (base / e["path"]).resolve() == target:
            return e
    raise CliError("manifest-mismatch", f"{bag_path} is not listed in {manifest}")


def cmd_remix(args) -> int:
    cfg = _config(args)
    h = cfg.build_hierarchy()
    if not args.manifest:
        raise CliError("precondition", "--manifest is required to look up bag labels")
    a = synth.read_bag(args.bag_a, _entry_for(args.manifest, args.bag_a), h)
    b = synth.read_bag(args.bag_b, _entry_for(args.manifest, args.bag_b), h)
    seed = _seed(args, cfg)
    if args.method == "sfr":
        sel = sfr_select(a, b, h, cfg.sfr_params(seed), literal_argmin=cfg.remix.literal_argmin,
                         threads=args.threads)
    else:
        sel = random_select(a, b, h, cfg.remix.fraction, seed)
    mixed = _merge(a, b, sel.selected_a)
    out = _out(args, cfg, "remix")
    out.mkdir(parents=True, exist_ok=True)
    entry = synth.write_bag(mixed, out / "remixed.milb")
    entry["path"] = "remixed.milb"
    (out / "manifest.json").write_text(json.dumps([entry], indent=1, sort_keys=True) + "\n")
    log_body = {
        "method": args.method,
        "bag_a": a.id,
        "bag_b": b.id,
        "n_a": a.n,
        "n_b": b.n,
        "label": list(mixed.labels),
        "selected_a": [int(i) for i in sel.selected_a],
        "selected_fraction": len(sel.selected_a) / a.n,
        "flags": sorted(sel.flags),
    }
    if sel.assignment is not None:
        log_body["cluster_order"] = sel.cluster_order
        log_body["cluster_of_a"] = [int(c) for c in sel.assignment.cluster_of[: a.n]]
        log_body["cluster_of_b"] = [int(c) for c in sel.assignment.cluster_of[a.n:]]
    _emit(canonical(log_body), out / "selection.json")
    return 0


def cmd_bench(args) -> int:
    from .remix import bench_remix
    cfg = _config(args)
    h = cfg.build_hierarchy()
    if args.data:
        corpus = synth.read_dataset(args.data, h)
    else:
        spec = cfg.synth_spec(h, seed=_seed(args, cfg))
        n_classes = h.n_classes(h.finest)
        spec.bags_per_class = max(1, -(-args.bags // n_classes))
        if args.instances:
            spec.instances_per_bag = (args.instances, args.instances)
        if args.dim:
            spec.feature_dim = args.dim
            spec.class_centers = synth.make_centers(n_classes, args.dim, cfg.synth.center_separation, cfg.seed)
            spec.background_center = None
        corpus = synth.generate(spec, threads=args.threads)[: args.bags]
    rep = bench_remix(corpus, h, args.method, cfg.sfr_params(_seed(args, cfg)), cfg.remix.fraction, args.reps)
    _emit(canonical(rep), Path(args.out) / "bench.json" if args.out else None)
    return 0


def cmd_metrics(args) -> int:
    cfg = _config(args)
    h = cfg.build_hierarchy()
    level = h.finest if args.level is None else args.level
    if not 0 <= level < h.depth:
        raise CliError("precondition", f"level {level} outside 0..{h.depth - 1}")
    try:
        cm = metrics.read_confusion_csv(args.confusion, h.n_classes(level), level)
    except (ValueError, IndexError, KeyError) as exc:
        raise CliError("confusion-format", str(exc)) from exc
    if cm.total == 0:
        raise CliError("precondition", "confusion matrix is empty")
    P = cfg.metrics.P if args.P is None else args.P
    w = metrics.build_confusion_weights(h, level, P)
    body = metrics.report(cm, w, severe_factor=cfg.metrics.risk_factor,
                          literal_indexing=cfg.metrics.literal_indexing).to_dict()
    out = Path(args.out) if args.out else None
    if args.format == "csv":
        _emit(_reports_csv([body]), out / "metrics.csv" if out else None)
    else:
        _emit(canonical({"P": P, "levels": [body]}), out / "metrics.json" if out else None)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (YAML)")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker threads (0 = auto)")
    common.add_argument("--format", choices=("json", "csv"), default="json")

    p = argparse.ArgumentParser(prog="sevmil", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic bag dataset")
    g.add_argument("--prefix", default="bag", help="bag id prefix")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--data", help="dataset manifest")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint")
    e.add_argument("--data", help="dataset manifest")
    e.add_argument("--P", type=float, default=None, help="severe-direction penalty")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("remix", parents=[common], help="remix two bags")
    r.add_argument("bag_a", help="donor bag file (more urgent)")
    r.add_argument("bag_b", help="recipient bag file")
    r.add_argument("--manifest", help="manifest listing both bags")
    r.add_argument("--method", choices=("sfr", "random_mix"), default="sfr")
    r.set_defaults(func=cmd_remix)

    b = sub.add_parser("bench", parents=[common], help="time a remix method")
    b.add_argument("--method", choices=("sfr", "random_mix"), default="sfr")
    b.add_argument("--reps", type=int, default=3)
    b.add_argument("--data", help="dataset manifest (default: generate from the config)")
    b.add_argument("--bags", type=int, default=100)
    b.add_argument("--instances", type=int, default=None, help="instances per generated bag")
    b.add_argument("--dim", type=int, default=None, help="feature dimension of generated bags")
    b.set_defaults(func=cmd_bench)

    m = sub.add_parser("metrics", parents=[common], help="score a confusion CSV")
    m.add_argument("confusion", help='CSV with header "true,pred,count"')
    m.add_argument("--level", type=int, default=None, help="hierarchy level (default: finest)")
    m.add_argument("--P", type=float, default=None, help="severe-direction penalty")
    m.set_defaults(func=cmd_metrics)
    return p


def _fail(code: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": {"code": code, "message": message}}, sort_keys=True) + "\n")
    return EXIT_CODES.get(code, 1)


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SEVMIL_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.threads == 0:
        args.threads = os.cpu_count() or 1
    try:
        return args.func(args)
    except CliError as exc:
        return _fail(exc.code, str(exc))
    except ConfigError as exc:
        return _fail(exc.code, str(exc))
    except synth.BagFormatError as exc:
        return _fail(exc.code, str(exc))
    except RemixError as exc:
        return _fail(exc.code, str(exc))
    except OSError as exc:
        return _fail("io", str(exc))


if __name__ == "__main__":
    sys.exit(main())
