"""``sensorcal`` command line: generate, label, calibrate, evaluate, report, stats.

Exit codes: 0 success, 1 usage error, 2 invalid input, 3 degenerate solve.
Set SENSORCAL_LOG_LEVEL (DEBUG, INFO, WARNING, ...) to control stderr logging.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .calibrator import CalibrationError, CalibrationOptions, calibrate, input_hash, load_result_tree
from .dataset import DatasetError, atomic_write_text, dataset_stats, dumps, load_dataset, save_dataset, tree_from_doc
from .geometry import TreeError

log = logging.getLogger("sensorcal")

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_DEGENERATE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _read_json(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{p}: no such file")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(str(p), f"invalid JSON: {exc}") from None


def _write_json(path, doc) -> None:
    atomic_write_text(path, dumps(doc))


def _provenance(args, inputs: dict, seed=None) -> dict:
    return {
        "tool": {"name": "sensorcal", "version": __version__},
        "command": args.command,
        "inputs": {k: {"path": str(v), "sha256": input_hash(v)} for k, v in inputs.items()},
        "seed": seed,
    }


def parse_weights(text: str) -> dict:
    out = {}
    for part in text.split(","):
        if not part.strip():
            continue
        key, sep, val = part.partition("=")
        key = key.strip()
        if not sep or key not in ("rgb", "range"):
            raise UsageError(f"bad weight {part!r}; expected rgb=<w>,range=<w>")
        try:
            w = float(val)
        except ValueError:
            raise UsageError(f"bad weight value {val!r}") from None
        if not w > 0:
            raise UsageError(f"weight {key} must be positive")
        out[key] = w
    return out


# ----------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    from . import synth

    cfg_doc = _read_json(args.config) if args.config else {}
    preset = args.preset or cfg_doc.get("preset", "sim_train")
    if preset not in synth.PRESET_COUNTS:
        raise UsageError(f"unknown preset {preset!r}; choose from {sorted(synth.PRESET_COUNTS)}")
    seed = args.seed if args.seed is not None else int(cfg_doc.get("seed", 0))
    noise_doc = cfg_doc.get("noise", {})
    noise = synth.NoiseModel.none() if args.noiseless or noise_doc == "none" else synth.NoiseModel(**(noise_doc or {}))
    counts = tuple(cfg_doc["counts"]) if "counts" in cfg_doc else None
    scene = synth.default_scene(preset, seed=seed, noise=noise, counts=counts,
                                first_collection_id=int(cfg_doc.get("first_collection_id", 0)))
    if "visibility" in cfg_doc:
        scene = replace(scene, visibility=replace(scene.visibility, **cfg_doc["visibility"]))
    dataset, gt = synth.generate(scene, with_raw=True)

    pert = {"translation": 0.1, "rotation": 0.1, "seed": seed, "anchor": dataset.sensors[0].id,
            **cfg_doc.get("perturb", {})}
    if pert["translation"] or pert["rotation"]:
        dataset.tree = synth.perturb_initial(gt, pert["translation"], pert["rotation"], int(pert["seed"]),
                                             dataset.sensors, pert["anchor"])
    dataset.meta["generator"].update({"preset": preset, "perturb": pert, "tool_version": __version__})
    if args.config:
        dataset.meta["generator"]["config_sha256"] = input_hash(args.config)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(dataset, out / "dataset.json")
    _write_json(out / "ground_truth.json", {**gt.to_doc(), "seed": seed, "tool": {"name": "sensorcal", "version": __version__}})
    _write_json(out / "label_seeds.json", synth.label_seeds(dataset, gt))
    print(dataset_stats(dataset).table())
    return EXIT_OK


# ----------------------------------------------------------------------------
# label


def cmd_label(args) -> int:
    from .labeling import label_dataset

    dataset = load_dataset(args.dataset)
    config = _read_json(args.config)
    labeled, summary = label_dataset(dataset, config)
    labeled.meta["labeling"].update(_provenance(args, {"dataset": args.dataset, "config": args.config}))
    out = Path(args.out)
    if out.suffix != ".json":
        out = out / "dataset.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(labeled, out)
    for sid in summary.labeled:
        print(f"{sid:<12} labeled {summary.labeled[sid]:>4}  tracked {summary.tracked[sid]:>4}  "
              f"missed {summary.missed[sid]:>4}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# calibrate


def _anchor_arg(value):
    if value is None:
        return "first"
    if value.lower() == "none":
        return None
    return value


def cmd_calibrate(args) -> int:
    dataset = load_dataset(args.dataset)
    anchor = _anchor_arg(args.anchor)
    if anchor == "first":
        anchor = dataset.sensors[0].id
    weights = {"rgb": 1.0, "range": 100.0}
    if args.weights:
        weights.update(parse_weights(args.weights))
    opts = CalibrationOptions(anchor=anchor, max_iters=args.max_iters, weights=weights,
                              longitudinal=args.longitudinal)
    initial = None
    inputs = {"dataset": args.dataset}
    if args.initial:
        initial = tree_from_doc(_read_json(args.initial).get("tree", {}), "initial.tree")
        inputs["initial"] = args.initial
    result = calibrate(dataset, initial, opts)
    seed = dataset.meta.get("generator", {}).get("seed")
    result.meta.update(_provenance(args, inputs, seed))
    _write_json(args.out, result.to_doc())
    log.info("status %s after %d iterations, cost %.6g -> %.6g", result.status, result.iterations,
             result.initial_cost, result.final_cost)
    print(f"status {result.status}  iterations {result.iterations}  "
          f"cost {result.initial_cost:.6g} -> {result.final_cost:.6g}")
    return EXIT_DEGENERATE if result.status == "degenerate" else EXIT_OK


# ----------------------------------------------------------------------------
# evaluate / report


def _evaluate(args):
    from .evaluation import report

    dataset = load_dataset(args.dataset)
    doc = _read_json(args.result)
    if "tree" not in doc:
        raise DatasetError("result.tree", "missing calibrated tree")
    tree = load_result_tree(doc)
    for e in list(tree):
        if e.kind == "pattern":
            tree.remove_edge(e.child)
    opts = doc.get("options", {})
    rep, raw = report(dataset, tree, weights=opts.get("weights"), longitudinal=opts.get("longitudinal", "polyline"))
    rep.meta = _provenance(args, {"dataset": args.dataset, "result": args.result}, doc.get("seed"))
    return rep, raw, doc


def cmd_evaluate(args) -> int:
    rep, _, _ = _evaluate(args)
    text = rep.text()
    if args.out:
        _write_json(args.out, rep.to_dict())
    if args.text:
        atomic_write_text(args.text, text)
    print(text)
    return EXIT_OK


def report_csv(rep) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["table", "source", "target", "rms", "unit", "samples", "collections", "excluded"])
    for r in rep.rows:
        w.writerow([r.table, r.src, r.dst, "" if r.rms is None else f"{r.rms:.6f}", r.unit, r.samples,
                    r.collections, r.excluded])
    for name, avg in rep.averages.items():
        w.writerow([name, "average", "", "" if avg is None else f"{avg:.6f}", "", "", "", ""])
    return buf.getvalue()


def cmd_report(args) -> int:
    from . import plotting

    rep, raw, doc = _evaluate(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", rep.to_dict())
    atomic_write_text(out / "report.txt", rep.text())
    atomic_write_text(out / "report.csv", report_csv(rep))
    figs = [
        plotting.pairwise_bars(rep, out / "pairwise_rms.png"),
        plotting.distance_histograms(raw, out / "distances.png"),
    ]
    if doc.get("cost_history"):
        figs.append(plotting.cost_history(doc["cost_history"], out / "cost_history.png"))
    print(rep.text())
    for f in figs:
        print(f"wrote {f}")
    return EXIT_OK


def cmd_stats(args) -> int:
    stats = dataset_stats(load_dataset(args.dataset))
    print(json.dumps(stats.to_dict(), indent=1) if args.json else stats.table())
    return EXIT_OK


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sensorcal", description="Multi-sensor extrinsic calibration against a planar pattern.")
    p.add_argument("--version", action="version", version=f"sensorcal {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate", help="simulate a dataset of the default cell")
    g.add_argument("--config", help="scene document (preset, seed, counts, noise, perturb, visibility)")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--preset", help="sim_train, sim_test, real_train or real_test")
    g.add_argument("--seed", type=int)
    g.add_argument("--noiseless", action="store_true")
    g.set_defaults(func=cmd_generate)

    lab = sub.add_parser("label", help="label range data from raw clouds and depth images")
    lab.add_argument("--dataset", required=True)
    lab.add_argument("--config", required=True, help="label document (lidar, depth, seeds, polygons)")
    lab.add_argument("--out", required=True, help="output dataset file or directory")
    lab.set_defaults(func=cmd_label)

    c = sub.add_parser("calibrate", help="estimate sensor extrinsics")
    c.add_argument("--dataset", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--anchor", help="sensor id to hold fixed, or 'none' (default: first sensor)")
    c.add_argument("--initial", help="document whose 'tree' replaces the dataset tree as the initial guess")
    c.add_argument("--weights", help="per-kind weights, e.g. rgb=1,range=100")
    c.add_argument("--max-iters", type=int, default=200)
    c.add_argument("--longitudinal", choices=("polyline", "samples"), default="polyline")
    c.set_defaults(func=cmd_calibrate)

    for name, func, help_ in (("evaluate", cmd_evaluate, "pairwise errors on a test dataset"),
                              ("report", cmd_report, "evaluate and render tables and figures")):
        e = sub.add_parser(name, help=help_)
        e.add_argument("--dataset", required=True)
        e.add_argument("--result", required=True)
        if name == "evaluate":
            e.add_argument("--out", help="machine-readable report (JSON)")
            e.add_argument("--text", help="text tables")
        else:
            e.add_argument("--out", required=True, help="output directory")
        e.set_defaults(func=func)

    s = sub.add_parser("stats", help="collection counts")
    s.add_argument("--dataset", required=True)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_stats)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SENSORCAL_LOG_LEVEL", "WARNING").upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"sensorcal: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DatasetError as exc:
        print(f"sensorcal: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TreeError, CalibrationError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"sensorcal: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
