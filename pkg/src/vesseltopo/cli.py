"""Staged command-line front end.

Stages write fixed-name artifacts plus a manifest (input hashes + the full
effective config) into the workdir, so re-running any stage with identical
inputs and config is byte-identical and the manifests form a provenance
chain. Exit codes: 0 ok, 2 config error, 3 missing prerequisite, 4 stage
failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys

import numpy as np

from . import bridge, optimizer, synth_eval, tables, topology, volume
from .pipeline import TopoSettings, extract_topology

STAGES = ("synth", "topo", "export", "refine", "reconstruct", "eval", "pipeline")

DEFAULT_CONFIG = {
    "paths": {
        "mask": None,
        "intensity": None,
        "hilum_artery": None,
        "hilum_vein": None,
        "workdir": ".",
    },
    "msfm": {
        "order": "multi-stencil-second",
        "speed_exponent": 4.0,
        "accept_threshold": 0.5,
    },
    "sampler": {
        "scales_mm": [1.0, 2.0],
    },
    "patch": {
        "size": [32, 32, 3],
        "spacing_mm": None,
    },
    "optimizer": {
        "strategy": "combined",
    },
    "oracle": None,
    "probabilities": {"full": None, "terminal": None},
    "labels": None,
    "synth": {
        "depth": 4,
        "trunk_radius": 5.2,
        "radius_decay": synth_eval.MURRAY_DECAY,
        "angle_range": [35.0, 55.0],
        "dims": [96, 96, 96],
        "spacing": [1.0, 1.0, 1.0],
        "intertwine_offset": 30.0,
    },
    "seed": 0,
}


class ConfigError(Exception):
    exit_code = 2


class PrereqError(Exception):
    exit_code = 3


class StageError(Exception):
    exit_code = 4


def _merge(base: dict, override: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _merge(base[key], val, path + key + ".")
        else:
            out[key] = val
    return out


def load_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                user = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}:{exc.lineno}: {exc.msg}")
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
        cfg = _merge(cfg, user)
    if args.workdir:
        cfg["paths"]["workdir"] = args.workdir
    if args.strategy:
        cfg["optimizer"]["strategy"] = args.strategy
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.probabilities:
        cfg["probabilities"]["full"] = args.probabilities
    if cfg["optimizer"]["strategy"] not in optimizer.STRATEGIES:
        raise ConfigError(f"optimizer.strategy must be one of {optimizer.STRATEGIES}")
    return cfg


def _wd(cfg) -> str:
    wd = cfg["paths"]["workdir"]
    os.makedirs(wd, exist_ok=True)
    return wd


def _need(path: str | None, what: str) -> str:
    if not path or not os.path.exists(path):
        raise PrereqError(f"missing prerequisite: {what} ({path})")
    return path


def _write_manifest(cfg, stage: str, inputs: dict[str, str], outputs: list[str]) -> None:
    wd = cfg["paths"]["workdir"]
    doc = {
        "stage": stage,
        "config": cfg,
        "inputs": {k: bridge.file_sha256(v) for k, v in sorted(inputs.items())},
        "outputs": sorted(outputs),
    }
    path = os.path.join(wd, f"manifest_{stage}.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def _mask_path(cfg) -> str:
    wd = cfg["paths"]["workdir"]
    cand = cfg["paths"]["mask"] or os.path.join(wd, "mask.mhd")
    return _need(cand, "vessel mask volume")


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_synth(cfg) -> None:
    wd = _wd(cfg)
    sd = dict(cfg["synth"])
    sd["angle_range"] = tuple(sd["angle_range"])
    sd["dims"] = tuple(sd["dims"])
    sd["spacing"] = tuple(sd["spacing"])
    spec = synth_eval.SynthSpec(seed=cfg["seed"], **sd)
    case = synth_eval.generate(spec)
    mask_path = os.path.join(wd, "mask.mhd")
    volume.save_volume(case.mask, mask_path)
    synth_eval.save_case(case, os.path.join(wd, "case.json"))
    _write_manifest(cfg, "synth", {}, ["mask.mhd", "mask.raw", "case.json"])


def stage_topo(cfg) -> None:
    wd = _wd(cfg)
    mask_path = _mask_path(cfg)
    mask = volume.load_volume(mask_path)
    volume.validate_mask(mask)
    inputs = {"mask": mask_path}

    if cfg["paths"]["intensity"]:
        intensity = volume.load_volume(_need(cfg["paths"]["intensity"], "intensity volume"))
        inputs["intensity"] = cfg["paths"]["intensity"]
    else:
        intensity = volume.Volume3D(mask.data.astype(np.float32), mask.spacing, mask.origin)
    dt = volume.distance_transform(mask)
    enhanced = volume.vesselness_enhance(intensity, cfg["sampler"]["scales_mm"])

    settings = TopoSettings(
        order=cfg["msfm"]["order"],
        speed_exponent=cfg["msfm"]["speed_exponent"],
        accept_threshold=cfg["msfm"]["accept_threshold"],
    )
    result = extract_topology(mask, dt, enhanced, settings)
    forest = result.forest

    outputs = ["forest.json", "dt.mhd", "dt.raw", "enhanced.mhd", "enhanced.raw",
               "intensity.mhd", "intensity.raw"]
    topology.save_forest(forest, os.path.join(wd, "forest.json"))
    volume.save_volume(dt, os.path.join(wd, "dt.mhd"))
    volume.save_volume(enhanced, os.path.join(wd, "enhanced.mhd"))
    volume.save_volume(intensity, os.path.join(wd, "intensity.mhd"))

    case_path = os.path.join(wd, "case.json")
    if os.path.exists(case_path):
        case = synth_eval.load_case(case_path, mask)
        truth = synth_eval.match_truth(forest, case)
        tables.write_labels(truth, os.path.join(wd, "truth_labels.tsv"))
        inputs["case"] = case_path
        outputs.append("truth_labels.tsv")
    _write_manifest(cfg, "topo", inputs, outputs)


def stage_export(cfg) -> None:
    wd = _wd(cfg)
    forest_path = _need(os.path.join(wd, "forest.json"), "forest from the topo stage")
    forest = topology.load_forest(forest_path)
    intensity = volume.load_volume(_need(os.path.join(wd, "intensity.mhd"), "intensity volume"))
    enhanced = volume.load_volume(_need(os.path.join(wd, "enhanced.mhd"), "enhanced volume"))

    spacing_mm = cfg["patch"]["spacing_mm"] or float(min(intensity.spacing))
    size = tuple(cfg["patch"]["size"])
    patches = {
        "orig": bridge.extract_patches(intensity, forest, size, spacing_mm),
        "enh": bridge.extract_patches(enhanced, forest, size, spacing_mm),
    }
    branches = topology.extract_branches(forest)
    term_ids = topology.terminal_branch_ids(forest, branches)

    labels = None
    labels_src = cfg["labels"]
    if labels_src == "truth":
        labels = tables.read_labels(_need(os.path.join(wd, "truth_labels.tsv"),
                                          "truth labels (synthetic case)"))
    elif labels_src:
        labels = tables.read_labels(_need(labels_src, "training labels"))
    out_dir = os.path.join(wd, "dataset")
    bridge.export_dataset(patches, forest, labels, out_dir,
                          terminal_ids=term_ids, patch_spacing_mm=spacing_mm)
    _write_manifest(cfg, "export", {"forest": forest_path},
                    [os.path.join("dataset", f) for f in sorted(os.listdir(out_dir))])


def stage_refine(cfg) -> None:
    wd = _wd(cfg)
    forest_path = _need(os.path.join(wd, "forest.json"), "forest from the topo stage")
    forest = topology.load_forest(forest_path)
    branches = topology.extract_branches(forest)
    subtrees = topology.extract_subtrees(forest)
    term_ids = topology.terminal_branch_ids(forest, branches)

    full_path = cfg["probabilities"]["full"]
    inputs = {"forest": forest_path}
    if not full_path and cfg["oracle"]:
        truth_path = _need(os.path.join(wd, "truth_labels.tsv"),
                           "truth labels for the oracle classifier")
        truth = tables.read_labels(truth_path)
        oracle_probs = bridge.oracle_classifier(
            truth, float(cfg["oracle"].get("flip_rate", 0.0)), seed=cfg["seed"])
        # truth covers matched particles only; unmatched ones carry no signal
        filled = dict(oracle_probs.probs)
        for p in forest.nodes:
            filled.setdefault(p.id, 0.5)
        full_path = os.path.join(wd, "probabilities_full.tsv")
        tables.write_probabilities(
            tables.ProbabilityTable(filled, oracle_probs.provenance), full_path)
        inputs["truth"] = truth_path
    if not full_path or not os.path.exists(full_path):
        raise PrereqError(f"missing prerequisite: probability table ({full_path or 'not configured'})")
    inputs["probabilities_full"] = full_path

    provenance = _provenance(full_path)
    if provenance not in ("full-pipe", "oracle", "merged"):
        raise StageError(f"{full_path}: expected a full-coverage table, got provenance {provenance!r}")
    probs = bridge.ingest_probabilities(full_path, forest, provenance, terminal_ids=term_ids)
    term_path = cfg["probabilities"]["terminal"]
    if term_path:
        term = bridge.ingest_probabilities(_need(term_path, "terminal probability table"),
                                           forest, "terminal-pipe", terminal_ids=term_ids)
        probs = bridge.mutual_correct(probs, term, term_ids)
        inputs["probabilities_terminal"] = term_path

    raw = optimizer.threshold_labels(probs)
    report = optimizer.score(forest, subtrees, branches, raw)
    refined = optimizer.refine(forest, subtrees, branches, raw, report,
                               strategy=cfg["optimizer"]["strategy"])
    tables.write_labels(raw, os.path.join(wd, "labels_raw.tsv"))
    tables.write_labels(refined, os.path.join(wd, "labels_refined.tsv"))
    optimizer.save_report(report, os.path.join(wd, "confidence.json"))
    _write_manifest(cfg, "refine", inputs,
                    ["labels_raw.tsv", "labels_refined.tsv", "confidence.json"])


def _provenance(path: str) -> str:
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline().strip()
    if first.startswith("#provenance="):
        return first.split("=", 1)[1]
    return ""


def stage_reconstruct(cfg) -> None:
    wd = _wd(cfg)
    forest = topology.load_forest(_need(os.path.join(wd, "forest.json"), "forest"))
    labels = tables.read_labels(_need(os.path.join(wd, "labels_refined.tsv"),
                                      "refined labels from the refine stage"))
    mask = volume.load_volume(_mask_path(cfg))
    vol = synth_eval.reconstruct_labels(forest, labels, mask.dims, mask.spacing, mask.origin)
    if cfg["paths"]["hilum_artery"] and cfg["paths"]["hilum_vein"]:
        ha = volume.load_volume(_need(cfg["paths"]["hilum_artery"], "hilum artery mask"))
        hv = volume.load_volume(_need(cfg["paths"]["hilum_vein"], "hilum vein mask"))
        vol = synth_eval.fuse_hilum(vol, ha, hv)
    volume.save_volume(vol, os.path.join(wd, "labels_vol.mhd"))
    _write_manifest(cfg, "reconstruct",
                    {"labels": os.path.join(wd, "labels_refined.tsv")},
                    ["labels_vol.mhd", "labels_vol.raw"])


def stage_eval(cfg) -> None:
    wd = _wd(cfg)
    pred_path = _need(os.path.join(wd, "labels_refined.tsv"), "refined labels")
    truth_path = _need(os.path.join(wd, "truth_labels.tsv"), "truth labels")
    pred = tables.read_labels(pred_path)
    truth = tables.read_labels(truth_path)
    # metrics run over truth-matched particles only
    pred_matched = tables.LabelTable(
        labels={i: pred.labels[i] for i in truth.labels}, stage=pred.stage)
    metrics = synth_eval.evaluate(pred_matched, truth)
    with open(os.path.join(wd, "metrics.json"), "w", encoding="utf-8") as fh:
        json.dump(metrics.to_dict(), fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    with open(os.path.join(wd, "metrics.tsv"), "w", encoding="utf-8") as fh:
        fh.write("#tp\ttn\tfp\tfn\taccuracy\tsensitivity\tspecificity\n")
        fh.write(metrics.to_tsv_line() + "\n")
    _write_manifest(cfg, "eval", {"pred": pred_path, "truth": truth_path},
                    ["metrics.json", "metrics.tsv"])


def stage_pipeline(cfg) -> None:
    stage_topo(cfg)
    stage_export(cfg)
    stage_refine(cfg)
    stage_reconstruct(cfg)
    if os.path.exists(os.path.join(cfg["paths"]["workdir"], "truth_labels.tsv")):
        stage_eval(cfg)


_STAGE_FUNCS = {
    "synth": stage_synth,
    "topo": stage_topo,
    "export": stage_export,
    "refine": stage_refine,
    "reconstruct": stage_reconstruct,
    "eval": stage_eval,
    "pipeline": stage_pipeline,
}


def _apply_thread_cap() -> None:
    cap = os.environ.get("VESSELTOPO_THREADS")
    if not cap:
        return
    try:
        n = max(1, int(cap))
    except ValueError:
        raise ConfigError(f"VESSELTOPO_THREADS must be an integer, got {cap!r}")
    try:
        import numba
        numba.set_num_threads(min(n, numba.get_num_threads()))
    except Exception:
        pass


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="vesseltopo",
        description="Vessel topology pipeline: mask -> forest -> A/V labels -> volumes",
    )
    parser.add_argument("stage", choices=STAGES)
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--workdir", help="artifact directory (overrides config)")
    parser.add_argument("--strategy", choices=optimizer.STRATEGIES,
                        help="optimizer strategy (overrides config)")
    parser.add_argument("--seed", type=int, help="seed (overrides config)")
    parser.add_argument("--probabilities", help="full-pipe probability TSV")
    args = parser.parse_args(argv)

    try:
        _apply_thread_cap()
        cfg = load_config(args)
        _STAGE_FUNCS[args.stage](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except PrereqError as exc:
        print(f"{exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - stage failures map to exit 4
        print(f"stage {args.stage} failed: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
