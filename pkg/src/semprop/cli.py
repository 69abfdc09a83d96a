"""Command-line entry point.

Every subcommand takes an optional JSON config (``--config``) and writes a
JSON result to ``--out`` (stdout when omitted). Progress goes to stderr.

Exit status: 0 success, 1 validation failure, 2 I/O error, 64 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Callable, Dict, List, Optional

import numpy as np

from . import data_path
from .bench import bench_autobatch, bench_memory, chain_hierarchy
from .gradcheck import run_all
from .hierarchy import HierarchyError, load_hierarchy_file
from .inference import hierarchical_predict
from .model import ModelConfig, build_model
from .synth import SynthSpec, gen_synthetic, read_manifest, write_manifest
from .tensorio import FormatError, load_tensor, save_tensor
from .train import TrainConfig, evaluate, load_trained, train

log = logging.getLogger("semprop")

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_USAGE = 0, 1, 2, 64

DEFAULT_HIERARCHY = data_path("concept_tree.json")
BENCH_MODEL = {"m": 16, "m0": 32, "stem_channels": [16, 32, 32, 32, 32]}


class ValidationFailure(Exception):
    """A check ran and reported failure; the payload is still written."""

    def __init__(self, payload: dict):
        super().__init__("validation failed")
        self.payload = payload


def _require(cfg: dict, key: str):
    if key not in cfg:
        raise ValueError(f"config is missing '{key}'")
    return cfg[key]


def cmd_validate_hierarchy(cfg: dict) -> dict:
    path = cfg.get("hierarchy", DEFAULT_HIERARCHY)
    try:
        h = load_hierarchy_file(path, cfg.get("max_depth"))
    except HierarchyError as e:
        raise ValidationFailure({"valid": False, "hierarchy": path, "kind": e.kind, "error": str(e)})
    log.info("%s: %d concepts, %d neurons, depth %d", path, len(h), len(h.neurons), h.max_depth)
    return {
        "valid": True,
        "hierarchy": path,
        "num_concepts": len(h),
        "num_neurons": len(h.neurons),
        "max_depth": h.max_depth,
        "neurons": [h.name_of(n) for n in h.neuron_order()],
        "single_child_chains": list(h.single_child_chains),
        "datasets": sorted(h.dataset_specs),
    }


def cmd_gen_synth(cfg: dict) -> dict:
    path = cfg.get("hierarchy", DEFAULT_HIERARCHY)
    h = load_hierarchy_file(path)
    out_dir = _require(cfg, "output_dir")
    fields = {k: cfg[k] for k in ("num_images", "image_size", "regions", "block", "channels",
                                  "noise", "offset_scale", "offset_decay", "seed",
                                  "appearance_seed", "coarse_depth", "coarse_dataset") if k in cfg}
    spec = SynthSpec(h, _require(cfg, "dataset"), **fields)
    manifest = gen_synthetic(spec)
    manifest.split = cfg.get("split", "train")
    if "name" in cfg:
        manifest.name = cfg["name"]
    paths = [write_manifest(manifest, out_dir, path)]
    if manifest.coarse_labels is not None:
        paths.append(write_manifest(manifest.coarse(), out_dir, path))
    log.info("wrote %d images to %s", len(manifest), out_dir)
    return {"manifests": paths, "num_images": len(manifest)}


def _load_manifests(paths: List[str]):
    docs, sets = [], []
    for p in paths:
        doc, m = read_manifest(p)
        docs.append(doc)
        sets.append(m)
    return docs, sets


def cmd_train(cfg: dict) -> dict:
    paths = _require(cfg, "manifests")
    if isinstance(paths, str):
        paths = [paths]
    if not paths:
        raise ValueError("'manifests' lists no datasets")
    docs, sets = _load_manifests(paths)
    h = load_hierarchy_file(cfg.get("hierarchy") or docs[0]["hierarchy"])
    tcfg = TrainConfig.from_dict(cfg.get("train", {}))
    out_dir = _require(cfg, "output_dir")

    def progress(rec, _grads):
        if rec["step"] % 50 == 0:
            log.info("step %d %s loss %.4f lr %.5f", rec["step"], rec["phase"], rec["loss"], rec["lr"])

    result = train(tcfg, sets, h, on_step=progress, output_dir=out_dir)
    last = result.log[-1]
    return {
        "checkpoints": result.checkpoint_paths,
        "log": os.path.join(out_dir, "train_log.jsonl"),
        "steps": len(result.log),
        "final_loss": last["loss"],
    }


def cmd_eval(cfg: dict) -> dict:
    model, h, _ = load_trained(_require(cfg, "checkpoint"))
    _, manifest = read_manifest(_require(cfg, "manifest"))
    if "dataset" in cfg:
        manifest.binding = cfg["dataset"]
    report = evaluate(model, h, manifest)
    log.info("mIoU %.4f pixel acc %.4f", report["mean_iou"], report["pixel_acc"])
    report["per_class_iou"] = {str(k): v for k, v in report["per_class_iou"].items()}
    report["num_images"] = len(manifest)
    return report


def cmd_predict(cfg: dict) -> dict:
    model, h, _ = load_trained(_require(cfg, "checkpoint"))
    binding = h.binding(_require(cfg, "dataset"))
    image = load_tensor(_require(cfg, "image"))
    labels = hierarchical_predict(model, image, h, binding).astype(np.int32)
    out = _require(cfg, "output")
    save_tensor(out, labels)
    return {"output": out, "shape": list(labels.shape),
            "labels": sorted(int(v) for v in np.unique(labels))}


def cmd_gradcheck(cfg: dict) -> dict:
    report = run_all(cfg.get("seed", 0))
    failed = [c for c in report["checks"] if not c["passed"]]
    log.info("%d checks, %d failed, %.2fs", len(report["checks"]), len(failed), report["seconds"])
    if failed:
        raise ValidationFailure(report)
    return report


def cmd_bench_autobatch(cfg: dict) -> dict:
    h = load_hierarchy_file(cfg.get("hierarchy", DEFAULT_HIERARCHY))
    model = build_model(h, ModelConfig.from_dict(cfg.get("model", BENCH_MODEL)), cfg.get("seed", 0))
    binding = h.binding(cfg.get("dataset", "cocostuff-like"))
    report = bench_autobatch(model, binding, cfg.get("batch_size", 4), cfg.get("image_size", 32),
                             cfg.get("repeats", 5), cfg.get("seed", 0))
    log.info("%d steps, %d merged, speedup %.2fx", report["steps"], report["merged"],
             report["speedup_vs_sequential_wallclock"])
    return report


def cmd_bench_memory(cfg: dict) -> dict:
    if "hierarchy" in cfg:
        h = load_hierarchy_file(cfg["hierarchy"])
    else:
        h = chain_hierarchy(cfg.get("depth", 5))
    model = build_model(h, ModelConfig.from_dict(cfg.get("model", BENCH_MODEL)), cfg.get("seed", 0))
    report = bench_memory(model, cfg.get("image_size", 16), cfg.get("seed", 0))
    log.info("peak %d buffers vs %d naive", report["peak_buffers"], report["naive_peak_buffers"])
    return report


COMMANDS: Dict[str, Callable[[dict], dict]] = {
    "validate-hierarchy": cmd_validate_hierarchy,
    "gen-synth": cmd_gen_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
    "bench-autobatch": cmd_bench_autobatch,
    "bench-memory": cmd_bench_memory,
}

USAGE = "usage: semprop {%s} [--config CONFIG.json] [--out OUT.json]" % ",".join(COMMANDS)


def _write(payload: dict, out: Optional[str]) -> None:
    text = json.dumps(payload, indent=1, sort_keys=True)
    if out:
        with open(out, "w") as fh:
            fh.write(text + "\n")
    else:
        sys.stdout.write(text + "\n")


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] not in COMMANDS:
        if argv and argv[0] in ("-h", "--help"):
            print(USAGE)
            return EXIT_OK
        print(USAGE, file=sys.stderr)
        if argv:
            print(f"unknown subcommand: {argv[0]}", file=sys.stderr)
        return EXIT_USAGE
    parser = argparse.ArgumentParser(prog=f"semprop {argv[0]}")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--out", help="write the JSON result here instead of stdout")
    parser.add_argument("-v", "--verbose", action="store_true")
    try:
        args = parser.parse_args(argv[1:])
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    try:
        cfg = {}
        if args.config:
            with open(args.config) as fh:
                cfg = json.load(fh)
            if not isinstance(cfg, dict):
                raise ValueError("config must be a JSON object")
        payload = COMMANDS[argv[0]](cfg)
        _write(payload, args.out)
        return EXIT_OK
    except ValidationFailure as e:
        log.error("validation failed")
        _write(e.payload, args.out)
        return EXIT_INVALID
    except (OSError, FormatError, json.JSONDecodeError) as e:
        log.error("I/O error: %s", e)
        return EXIT_IO
    except (ValueError, KeyError, TypeError) as e:
        log.error("invalid input: %s", e)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
