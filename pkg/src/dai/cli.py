"""Command line front end: ``dai gen|discover|extract|train|eval|run``."""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Sequence

from . import __version__
from .decipher import CalibrationSet, FieldMap, discover
from .errors import DaiError, SchemaError, UsageError
from .experiment import (ExperimentConfig, calibration_run, capture_windows, evaluate, stratified_split,
                         write_predictions, write_report)
from .qoe import TARGETS, ForestParams, build_dataset, load_model, serialize_model, train_forest
from .qos import read_qos_csv, write_qos_csv
from .streamgen import GenConfig, GroundTruth, derive_seed, generate_stream
from .traffic_core import read_pcap, write_pcap

log = logging.getLogger("dai")


def _load_config(args: argparse.Namespace) -> ExperimentConfig:
    if args.config:
        path = Path(args.config)
        cfg = ExperimentConfig.from_json(path.read_text(), str(path))
    else:
        cfg = ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out = args.out
    if getattr(args, "window_ms", None) is not None:
        cfg.window_us = int(args.window_ms * 1000)
    return cfg


def _prepare_out(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"{out} exists and is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def _write_manifest(out: Path, kind: str, cfg: ExperimentConfig, entries: list[dict]) -> None:
    doc = {"kind": kind, "seed": cfg.seed, "config": cfg.to_json(), "outputs": entries}
    (out / "manifest.json").write_text(json.dumps(doc, indent=1) + "\n")


def cmd_gen(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    out = Path(cfg.out)
    _prepare_out(out, args.force)
    entries = []
    if args.calibration:
        _, truths, captures = calibration_run(cfg.seed, cfg.calibration_losses, cfg.calibration_s)
        items = [(f"calib_{i:02d}", loss, cap, truth)
                 for i, (loss, cap, truth) in enumerate(zip(cfg.calibration_losses, captures, truths))]
    else:
        items = []
        for i, cond in enumerate(cfg.grid):
            gen = GenConfig(duration_s=cfg.per_condition_s, seed=derive_seed(cfg.seed, i), condition=cond)
            cap, truth = generate_stream(gen)
            items.append((f"cond_{i:02d}", cond.loss_rate, cap, truth))
            log.info("generated %s (%s): %d records", f"cond_{i:02d}", cond.label(), len(cap))
    for name, loss, cap, truth in items:
        write_pcap(cap, out / f"{name}.pcap")
        truth.save(out / f"{name}.truth.json", out / f"{name}.packets.csv")
        entries.append({"name": name, "pcap": f"{name}.pcap", "truth": f"{name}.truth.json",
                        "packets": f"{name}.packets.csv", "seed": truth.seed,
                        "condition": asdict(truth.condition), "loss_rate": loss})
    _write_manifest(out, "calibration" if args.calibration else "grid", cfg, entries)
    print(f"wrote {len(entries)} captures to {out}")
    return 0


def _diagnostics_table(fm: FieldMap) -> str:
    d = fm.diagnostics
    lines = [f"{'pos':>3} {'modal':>5} {'freq':>7} {'r(loss)':>8} {'xor2^p-1':>9}  role"]
    roles = {p: "constant" for p in fm.constant_positions}
    roles[fm.pt_position] = "payload type"
    for p in fm.seq_positions:
        roles[p] = "sequence"
    for i, (v, f, x) in enumerate(zip(d["modal_values"], d["modal_freqs"], d["xor_scores"])):
        r = d["correlations"][i]
        rs = "   -    " if r is None else f"{r:8.3f}"
        lines.append(f"{i + 1:>3} {v:>5} {f:>7.3f} {rs} {x:>9.3f}  {roles.get(i + 1, '')}")
    lines.append(f"seq key 0x{fm.seq_key:0{2 * fm.seq_width}x} (width {fm.seq_width} bytes), "
                 f"video PT cipher {fm.video_pt_cipher}")
    return "\n".join(lines)


def cmd_discover(args: argparse.Namespace) -> int:
    pcaps = list(args.pcaps)
    losses = [float(x) for x in args.loss_rates.split(",")] if args.loss_rates else []
    if args.manifest:
        doc = json.loads(Path(args.manifest).read_text())
        base = Path(args.manifest).parent
        pcaps = [str(base / e["pcap"]) for e in doc["outputs"]]
        losses = [float(e["loss_rate"]) for e in doc["outputs"]]
    if not pcaps:
        raise UsageError("no calibration captures given")
    if len(losses) != len(pcaps):
        raise UsageError(f"{len(pcaps)} captures but {len(losses)} loss rates")
    calibration = CalibrationSet.of((loss, read_pcap(p)) for loss, p in zip(losses, pcaps))
    fm = discover(calibration, args.positions, args.threshold)
    out = Path(args.out)
    fm.save(out)
    print(_diagnostics_table(fm))
    print(f"wrote {out}")
    return 0


def cmd_extract(args: argparse.Namespace) -> int:
    fm = FieldMap.load(args.fieldmap)
    capture = read_pcap(args.pcap)
    window_us = int(args.window_ms * 1000)
    _, windows = capture_windows(capture, fm, window_us, bind=not args.no_rebind)
    write_qos_csv(windows, args.out)
    print(f"wrote {len(windows)} windows to {args.out}")
    return 0


def _samples(qos_paths: Sequence[str], truth_paths: Sequence[str]):
    if len(qos_paths) != len(truth_paths):
        raise UsageError(f"{len(qos_paths)} QoS files but {len(truth_paths)} ground-truth files")
    groups = []
    for q, t in zip(qos_paths, truth_paths):
        windows = sorted(read_qos_csv(q), key=lambda w: w.t_start_us)
        groups.append(build_dataset(windows, GroundTruth.load(t)))
    return groups


def cmd_train(args: argparse.Namespace) -> int:
    samples = [s for g in _samples(args.qos, args.truth) for s in g]
    params = ForestParams(args.trees, args.max_depth, args.min_leaf)
    model = train_forest(samples, args.target, params, args.seed)
    Path(args.out).write_bytes(serialize_model(model))
    print(f"trained {args.target} model on {len(samples)} windows -> {args.out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    try:
        model = load_model(Path(args.model).read_bytes())
    except DaiError as exc:
        raise SchemaError(args.model, None, str(exc)) from exc
    samples = [s for g in _samples(args.qos, args.truth) for s in g]
    report, rows = evaluate(model, samples)
    write_report([report], args.report)
    if args.predictions:
        write_predictions(rows, args.predictions)
    print(f"{model.target}: micro F1 {report.micro_f1:.3f}, macro F1 {report.macro_f1:.3f} on {report.n} windows")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    """Whole experiment: calibration, discovery, grid, extraction, split, training, evaluation."""
    cfg = _load_config(args)
    out = Path(cfg.out)
    _prepare_out(out, args.force)
    calibration, _, _ = calibration_run(cfg.seed, cfg.calibration_losses, cfg.calibration_s)
    fm = discover(calibration, cfg.n_positions, cfg.constant_threshold)
    fm.save(out / "fieldmap.json")
    groups = []
    for i, cond in enumerate(cfg.grid):
        gen = GenConfig(duration_s=cfg.per_condition_s, seed=derive_seed(cfg.seed, i), condition=cond)
        cap, truth = generate_stream(gen)
        _, windows = capture_windows(cap, fm, cfg.window_us)
        write_qos_csv(windows, out / f"cond_{i:02d}.qos.csv")
        groups.append(build_dataset(windows, truth))
    train, test = stratified_split(groups, 0.7, cfg.seed)
    reports = []
    for target in TARGETS:
        model = train_forest(train, target, ForestParams(), cfg.seed)
        (out / f"model_{target}.json").write_bytes(serialize_model(model))
        report, rows = evaluate(model, test)
        write_predictions(rows, out / f"predictions_{target}.csv")
        reports.append(report)
        print(f"{target:>10}: micro F1 {report.micro_f1:.3f}  macro F1 {report.macro_f1:.3f}  "
              f"top features {', '.join(report.top_features())}")
    write_report(reports, out / "report.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dai", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate captures and ground truth")
    g.add_argument("--config")
    g.add_argument("--out")
    g.add_argument("--seed", type=int)
    g.add_argument("--force", action="store_true")
    g.add_argument("--calibration", action="store_true", help="generate the loss-calibration set instead")
    g.set_defaults(func=cmd_gen)

    d = sub.add_parser("discover", help="recover the header layout from calibration captures")
    d.add_argument("pcaps", nargs="*")
    d.add_argument("--loss-rates", help="comma-separated induced loss rates, one per capture")
    d.add_argument("--manifest", help="calibration manifest written by 'dai gen --calibration'")
    d.add_argument("--out", default="fieldmap.json")
    d.add_argument("--positions", type=int, default=16)
    d.add_argument("--threshold", type=float, default=0.99)
    d.set_defaults(func=cmd_discover)

    e = sub.add_parser("extract", help="windowed QoS features from one capture")
    e.add_argument("pcap")
    e.add_argument("--fieldmap", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--window-ms", type=float, default=2000)
    e.add_argument("--no-rebind", action="store_true", help="use the field map's cipher values as-is")
    e.set_defaults(func=cmd_extract)

    t = sub.add_parser("train", help="train one random-forest model")
    t.add_argument("--qos", nargs="+", required=True)
    t.add_argument("--truth", nargs="+", required=True)
    t.add_argument("--target", choices=TARGETS, required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--trees", type=int, default=100)
    t.add_argument("--max-depth", type=int, default=12)
    t.add_argument("--min-leaf", type=int, default=2)
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("eval", help="evaluate a model against ground truth")
    v.add_argument("--model", required=True)
    v.add_argument("--qos", nargs="+", required=True)
    v.add_argument("--truth", nargs="+", required=True)
    v.add_argument("--report", required=True)
    v.add_argument("--predictions")
    v.set_defaults(func=cmd_eval)

    r = sub.add_parser("run", help="full experiment on the configured grid")
    r.add_argument("--config")
    r.add_argument("--out")
    r.add_argument("--seed", type=int)
    r.add_argument("--window-ms", type=float)
    r.add_argument("--force", action="store_true")
    r.set_defaults(func=cmd_run)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except DaiError as exc:
        print(f"dai {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"dai {args.command}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
