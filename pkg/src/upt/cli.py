"""Command-line entry point: ``upt <command> [flags]``.

Each command resolves its options from flags, then an optional INI file
(``--config``), then built-in defaults, prints the effective options to
stderr as one JSON line, and writes its outputs under ``--out``. Failures
exit nonzero with one JSON line on stderr naming the offending field.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import multiprocessing
import re
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .analysis import export_attention, intervene_attention, intervention_sweep, score_deltas
from .config import ConfigError, load
from .detections import (
    Detection,
    GroundTruthPair,
    SchemaError,
    TokenSet,
    read_category_table,
    read_detections,
    read_ground_truth,
    read_predictions,
    read_validity_table,
    write_json,
    write_predictions,
)
from .evaluation import evaluate
from .head import AttentionEdit, HeadConfig, InteractionHead, load_checkpoint, save_checkpoint
from .inference import PreprocessConfig, predict_image, preprocess
from .synthetic import Dataset, SyntheticSpec, gen_synthetic
from .training import TrainConfig, train, write_metrics

logger = logging.getLogger("upt")


class CliError(Exception):
    def __init__(self, kind: str, field_name: str, message: str):
        self.kind = kind
        self.field = field_name
        super().__init__(message)


# defaults ---------------------------------------------------------------------

PRE = {"nms_iou": 0.5, "score_min": 0.2, "min_keep": 3, "max_keep": 15, "backfill": True}

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "gen-data": {
        "seed": 0,
        "num_images": 600,
        "num_actions": 3,
        "num_object_classes": 3,
        "feature_dim": 16,
        "decoy_rate": 0.5,
        "feature_noise": 0.3,
    },
    "train": {
        "seed": 0,
        "data": "",
        "eval_data": "",
        "m": 0,
        "heads": 2,
        "branches": 4,
        "ffn_dim": 0,
        "pe_hidden": 0,
        "n_coop": 2,
        "n_comp": 1,
        "variant": "modified",
        "epochs": 20,
        "lr": 1e-4,
        "lr_drop_epoch": 10,
        "batch_size": 16,
        "lambda_infer": 2.8,
        "weight_decay": 1e-4,
        **PRE,
    },
    "infer": {"seed": 0, "workers": 1, "checkpoint": "", "data": "", "detections": "", "lam": 2.8, **PRE},
    "eval": {
        "seed": 0,
        "predictions": "",
        "data": "",
        "ground_truth": "",
        "setting": "default",
        "iou_min": 0.5,
    },
    "analyze-deltas": {
        "seed": 0,
        "reference": "",
        "variant": "",
        "data": "",
        "lam": 2.8,
        "easy_threshold": 0.05,
        **PRE,
    },
    "intervene": {
        "seed": 0,
        "checkpoint": "",
        "data": "",
        "image_id": "",
        "pair": "",
        "edits": "",
        "lam": 2.8,
        **PRE,
    },
    "export-attn": {"seed": 0, "workers": 1, "checkpoint": "", "data": "", "detections": "", "image_id": "", **PRE},
    "bench-pairwise": {
        "seed": 0,
        "sizes": "8,16,32,64",
        "m": 16,
        "heads": 2,
        "branches": 4,
        "n_coop": 2,
        "n_comp": 0,
        "repeats": 3,
    },
}

HELP = {
    "gen-data": "write a synthetic detection dataset with ground truth",
    "train": "train an interaction head and write checkpoint.json + metrics.jsonl",
    "infer": "score detections with a checkpoint and write predictions.jsonl",
    "eval": "compute mAP (Full / Rare / Non-rare) and write report_<setting>.json",
    "analyze-deltas": "per-bucket score changes between two checkpoints (deltas.tsv, scatter.tsv)",
    "intervene": "edit unary attention and compare scores (intervention.json or sweep.tsv + summary.json)",
    "export-attn": "write unary and pairwise attention maps as attention/<image_id>.json",
    "bench-pairwise": "measure pair-token count and head time against the number of tokens (bench.json)",
}


# argument parsing ---------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        m = re.search(r"argument (\S+?):", message) or re.search(
            r"(?:unrecognized arguments|required): (\S+)", message
        )
        raise CliError("usage", m.group(1) if m else "<command>", message)


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="upt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"upt {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    for name, defaults in DEFAULTS.items():
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", default=None, help=f"INI file; reads [common] and [{name}]")
        if "workers" not in defaults:
            p.add_argument("--workers", type=int, default=None, help="accepted for uniformity; runs serially")
        for key, value in defaults.items():
            kind = type(value)
            if kind is bool:
                p.add_argument(_flag(key), dest=key, default=None, action=argparse.BooleanOptionalAction,
                               help=f"default {value}")
            else:
                p.add_argument(_flag(key), dest=key, type=kind, default=None, help=f"default {value!r}")
    return parser


def resolve_options(args: argparse.Namespace) -> Dict[str, Any]:
    defaults = DEFAULTS[args.command]
    opts = load(args.command, defaults, vars(args), args.config)
    if "workers" in opts and opts["workers"] < 1:
        raise CliError("invalid", "--workers", "must be at least 1")
    return opts


# helpers ----------------------------------------------------------------------


def _path(opts: Dict[str, Any], key: str, fallback: Optional[Path] = None, must_exist: bool = True) -> Path:
    value = opts.get(key) or ""
    if not value:
        if fallback is None:
            raise CliError("usage", _flag(key), "is required")
        p = fallback
    else:
        p = Path(value)
    if must_exist and not p.exists():
        raise CliError("missing_file", _flag(key), f"no such file: {p}")
    return p


def _data_dir(opts) -> Path:
    d = _path(opts, "data")
    if not d.is_dir():
        raise CliError("invalid", "--data", f"not a directory: {d}")
    return d


def _pre(opts) -> PreprocessConfig:
    return PreprocessConfig(opts["nms_iou"], opts["score_min"], opts["min_keep"], opts["max_keep"], opts["backfill"])


def _load_dataset(opts, feature_dim: Optional[int] = None, key: str = "data") -> Dataset:
    d = _path(opts, key)
    for name in ("detections.jsonl", "categories.json", "validity.json"):
        if not (d / name).exists():
            raise CliError("missing_file", _flag(key), f"no such file: {d / name}")
    return Dataset.load(d, feature_dim)


def _tables(opts):
    d = _data_dir(opts)
    for name in ("categories.json", "validity.json"):
        if not (d / name).exists():
            raise CliError("missing_file", "--data", f"no such file: {d / name}")
    return read_category_table(d / "categories.json"), read_validity_table(d / "validity.json")


def _checkpoint(opts, key: str = "checkpoint") -> InteractionHead:
    return load_checkpoint(_path(opts, key))


def _select(images, image_id: str):
    if not image_id:
        return images
    chosen = [(i, d) for i, d in images if i == image_id]
    if not chosen:
        raise CliError("invalid", "--image-id", f"image {image_id!r} not found")
    return chosen


# per-image worker pool ----------------------------------------------------------------

_STATE: Dict[str, Any] = {}


def _init_worker(state: Dict[str, Any]) -> None:
    _STATE.clear()
    _STATE.update(state)
    _STATE["head"] = load_checkpoint(state["checkpoint"])


def _map_images(fn: Callable, items: Sequence, workers: int, state: Dict[str, Any]) -> List:
    """Apply ``fn`` to every item, serially or in a process pool. The result
    order always follows ``items``."""
    if workers <= 1 or len(items) <= 1:
        _init_worker(state)
        return [fn(item) for item in items]
    ctx = multiprocessing.get_context("fork")
    with ctx.Pool(min(workers, len(items)), initializer=_init_worker, initargs=(state,)) as pool:
        return pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers)))


def _infer_one(item):
    image_id, dets = item
    s = _STATE
    return predict_image(s["head"], image_id, dets, s["categories"], s["validity"], s["lam"], s["pre"])


def _export_one(item):
    image_id, dets = item
    tokens = preprocess(dets, _STATE["categories"], _STATE["pre"])
    path = Path(_STATE["out"]) / f"{image_id}.json"
    if len(tokens) == 0:
        return image_id, None
    export_attention(_STATE["head"], tokens, path, image_id)
    return image_id, str(path)


# commands ---------------------------------------------------------------------


def cmd_gen_data(opts, out: Path) -> None:
    spec = SyntheticSpec(
        num_images=opts["num_images"],
        num_actions=opts["num_actions"],
        num_object_classes=opts["num_object_classes"],
        feature_dim=opts["feature_dim"],
        decoy_rate=opts["decoy_rate"],
        feature_noise=opts["feature_noise"],
    )
    try:
        spec.validate()
    except ValueError as exc:
        raise CliError("invalid", "<spec>", str(exc)) from None
    gen_synthetic(spec, opts["seed"]).save(out)


def cmd_train(opts, out: Path) -> None:
    data = _load_dataset(opts)
    eval_set = _load_dataset(opts, key="eval_data") if opts["eval_data"] else None
    if not data.samples or not data.samples[0].detections:
        raise CliError("invalid", "--data", "dataset has no detections")
    m = opts["m"] or len(data.samples[0].detections[0].feature)
    try:
        cfg = HeadConfig(
            m=m,
            heads=opts["heads"],
            n_coop=opts["n_coop"],
            n_comp=opts["n_comp"],
            branches=opts["branches"],
            num_actions=data.validity.num_actions,
            ffn_dim=opts["ffn_dim"] or None,
            pe_hidden=opts["pe_hidden"] or None,
            coop_variant=opts["variant"],
            init_seed=opts["seed"],
        )
        tcfg = TrainConfig(
            lr=opts["lr"],
            epochs=opts["epochs"],
            lr_drop_epoch=opts["lr_drop_epoch"],
            batch_size=opts["batch_size"],
            lambda_infer=opts["lambda_infer"],
            weight_decay=opts["weight_decay"],
            seed=opts["seed"],
        )
    except ValueError as exc:
        raise CliError("invalid", "<model>", str(exc)) from None
    head = InteractionHead(cfg)
    history = train(data, head, tcfg, eval_set, _pre(opts))
    save_checkpoint(out / "checkpoint.json", head)
    write_metrics(out / "metrics.jsonl", history)


def cmd_infer(opts, out: Path) -> None:
    categories, validity = _tables(opts)
    det_path = _path(opts, "detections", _data_dir(opts) / "detections.jsonl")
    ckpt = _path(opts, "checkpoint")
    head = load_checkpoint(ckpt)
    images = read_detections(det_path, head.cfg.m)
    state = {
        "checkpoint": str(ckpt),
        "categories": categories,
        "validity": validity,
        "lam": opts["lam"],
        "pre": _pre(opts),
    }
    results = _map_images(_infer_one, images, opts["workers"], state)
    order = sorted(range(len(images)), key=lambda k: images[k][0])
    write_predictions(out / "predictions.jsonl", [p for k in order for p in results[k]])


def cmd_eval(opts, out: Path) -> None:
    categories, validity = _tables(opts)
    preds = read_predictions(_path(opts, "predictions"))
    gts = read_ground_truth(_path(opts, "ground_truth", _data_dir(opts) / "ground_truth.jsonl"))
    settings = ("default", "known_objects") if opts["setting"] == "both" else (opts["setting"],)
    for setting in settings:
        if setting not in ("default", "known_objects"):
            raise CliError("invalid", "--setting", f"expected default, known_objects or both, got {setting!r}")
        report = evaluate(preds, gts, validity, categories, setting, opts["iou_min"])
        (out / f"report_{setting}.json").write_text(report.dumps(), encoding="utf-8")
        print(f"{setting}\tfull={report.full:.6f}\trare={report.rare}\tnon_rare={report.non_rare}")


def cmd_analyze_deltas(opts, out: Path) -> None:
    ref = _checkpoint(opts, "reference")
    var = _checkpoint(opts, "variant")
    data = _load_dataset(opts, ref.cfg.m)
    table = score_deltas(ref, var, data, opts["lam"], opts["easy_threshold"], _pre(opts))
    table.write(out / "deltas.tsv", out / "scatter.tsv")
    for b in table.counts:
        print(f"{b}\tcount={table.counts[b]}\tmean={table.mean[b]:.6f}\tmedian={table.median[b]:.6f}")


def parse_edits(text: str) -> List[AttentionEdit]:
    """``layer,i,j,action[,value[,head]]`` entries separated by ``;``."""
    edits = []
    for chunk in filter(None, (c.strip() for c in text.split(";"))):
        parts = [p.strip() for p in chunk.split(",")]
        if not 4 <= len(parts) <= 6:
            raise CliError("invalid", "--edits", f"cannot parse edit {chunk!r}")
        try:
            value = float(parts[4]) if len(parts) > 4 else 1.0
            head = int(parts[5]) if len(parts) > 5 else None
            edits.append(AttentionEdit(parts[0], int(parts[1]), int(parts[2]), parts[3], value, head))
        except ValueError as exc:
            raise CliError("invalid", "--edits", f"{chunk!r}: {exc}") from None
    return edits


def cmd_intervene(opts, out: Path) -> None:
    head = _checkpoint(opts)
    data = _load_dataset(opts, head.cfg.m)
    pre = _pre(opts)
    edits = parse_edits(opts["edits"])
    if opts["pair"]:
        try:
            i, j = (int(v) for v in opts["pair"].split(","))
        except ValueError:
            raise CliError("invalid", "--pair", f"expected 'i,j', got {opts['pair']!r}") from None
        for k in range(head.cfg.n_coop):
            edits += [AttentionEdit(f"coop:{k}", i, j, "neg_inf"), AttentionEdit(f"coop:{k}", j, i, "neg_inf")]

    if not edits:
        records = intervention_sweep(head, data, opts["lam"], pre)
        with open(out / "sweep.tsv", "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["image_id", "human", "object", "action", "baseline", "edited", "delta"])
            for r in records:
                w.writerow([r.image_id, r.i, r.j, r.action, repr(r.baseline), repr(r.edited), repr(r.delta)])
        decreased = sum(r.delta < 0 for r in records)
        summary = {
            "instances": len(records),
            "decreased": decreased,
            "fraction_decreased": decreased / len(records) if records else None,
            "mean_delta": float(np.mean([r.delta for r in records])) if records else None,
        }
        write_json(out / "summary.json", summary)
        print(json.dumps(summary, sort_keys=True))
        return

    if not opts["image_id"]:
        raise CliError("usage", "--image-id", "required when --pair or --edits is given")
    sample = next((s for s in data.samples if s.image_id == opts["image_id"]), None)
    if sample is None:
        raise CliError("invalid", "--image-id", f"image {opts['image_id']!r} not found")
    tokens = preprocess(sample.detections, data.categories, pre)
    try:
        base, edited, res = intervene_attention(head, tokens, edits, data.validity, opts["lam"])
    except IndexError as exc:
        raise CliError("invalid", "--edits", str(exc)) from None
    doc = {
        "image_id": sample.image_id,
        "edits": [asdict(e) for e in edits],
        "pairs": [[int(p.i), int(p.j)] for p in res.pairs],
        "baseline": base.tolist(),
        "edited": edited.tolist(),
        "delta": (edited - base).tolist(),
    }
    write_json(out / "intervention.json", doc)


def cmd_export_attn(opts, out: Path) -> None:
    categories, _ = _tables(opts)
    det_path = _path(opts, "detections", _data_dir(opts) / "detections.jsonl")
    ckpt = _path(opts, "checkpoint")
    head = load_checkpoint(ckpt)
    images = _select(read_detections(det_path, head.cfg.m), opts["image_id"])
    target = out / "attention"
    target.mkdir(parents=True, exist_ok=True)
    state = {"checkpoint": str(ckpt), "categories": categories, "pre": _pre(opts), "out": str(target)}
    _map_images(_export_one, images, opts["workers"], state)


def _random_tokens(rng: np.random.Generator, n: int, m: int) -> TokenSet:
    n_h = max(1, n // 2)
    dets = []
    for k in range(n):
        cxcy = rng.uniform(0.2, 0.8, size=2)
        wh = rng.uniform(0.05, 0.2, size=2)
        dets.append(Detection(np.concatenate([cxcy, wh]), 0.9, 0 if k < n_h else 1, rng.normal(size=m)))
    return TokenSet(dets, list(range(n_h)), list(range(n_h, n)))


def fit_exponent(sizes: Sequence[float], values: Sequence[float]) -> float:
    """Slope of log(value) against log(size)."""
    return float(np.polyfit(np.log(sizes), np.log(values), 1)[0])


def cmd_bench_pairwise(opts, out: Path) -> None:
    try:
        sizes = [int(v) for v in opts["sizes"].split(",")]
    except ValueError:
        raise CliError("invalid", "--sizes", f"expected comma-separated integers, got {opts['sizes']!r}") from None
    if len(sizes) < 2 or min(sizes) < 2:
        raise CliError("invalid", "--sizes", "need at least two sizes, each at least 2")
    head = InteractionHead(
        HeadConfig(
            m=opts["m"], heads=opts["heads"], branches=opts["branches"], n_coop=opts["n_coop"],
            n_comp=opts["n_comp"], num_actions=3, init_seed=opts["seed"],
        )
    )
    rng = np.random.default_rng(opts["seed"])
    rows = []
    for n in sizes:
        tokens = _random_tokens(rng, n, opts["m"])
        best = float("inf")
        for _ in range(max(1, opts["repeats"])):
            t0 = time.perf_counter()
            res = head(tokens)
            best = min(best, time.perf_counter() - t0)
        k = len(res.pairs)
        rows.append({"n": n, "humans": len(tokens.human_indices), "pairs": k,
                     "pair_floats": k * head.cfg.m, "seconds": best})
    doc = {
        "rows": rows,
        "exponent_pairs": fit_exponent(sizes, [r["pairs"] for r in rows]),
        "exponent_pair_floats": fit_exponent(sizes, [r["pair_floats"] for r in rows]),
        "exponent_seconds": fit_exponent(sizes, [r["seconds"] for r in rows]),
    }
    write_json(out / "bench.json", doc)
    for r in rows:
        print(f"n={r['n']}\tpairs={r['pairs']}\tseconds={r['seconds']:.6f}")
    print(f"exponent pairs={doc['exponent_pairs']:.3f} seconds={doc['exponent_seconds']:.3f}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "analyze-deltas": cmd_analyze_deltas,
    "intervene": cmd_intervene,
    "export-attn": cmd_export_attn,
    "bench-pairwise": cmd_bench_pairwise,
}


def _report(kind: str, field_name: str, message: str, **extra) -> None:
    doc = {"error": kind, "field": field_name, "message": message, **extra}
    sys.stderr.write(json.dumps(doc, sort_keys=True) + "\n")


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        opts = resolve_options(args)
        sys.stderr.write("config " + json.dumps({"command": args.command, **opts}, sort_keys=True) + "\n")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](opts, out)
    except CliError as exc:
        _report(exc.kind, exc.field, str(exc))
        return 2 if exc.kind == "usage" else 1
    except ConfigError as exc:
        _report("config", exc.field, str(exc))
        return 1
    except SchemaError as exc:
        _report("schema", exc.field, str(exc), path=exc.path, line=exc.line)
        return 1
    except (ValueError, KeyError) as exc:
        _report("invalid", "<input>", str(exc))
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
