"""
End-to-end analysis of one base checkpoint against one or more fine-tuned runs.

Stages run per layer on the worker pool and record their results in
``<output_dir>/state.db``, so an interrupted pipeline resumes where it
stopped. Output layout::

    report.json                 every block, schema-versioned
    sparsity.csv spectral.csv overlaps.csv
    masks/run<r>/               update masks + manifest.json
    masks/recipe<j>_<kind>/     geometric masks + manifest.json
    consensus/ profiles/        per-layer CSVs
"""
import logging
import os
from collections import OrderedDict
from typing import Dict, List, Optional, Tuple

import numpy as np

from weightlens.analytics import (CONSENSUS_FORMULA, BASELINE_FORMULA, JACCARD_FORMULA, OVERLAP_FORMULA,
                                  PROFILE_FORMULA, consensus, downsample_grid, jaccard_matrix, mean_off_diagonal,
                                  overlap_ratio, pairwise_baseline, profile_alignment, ratio_profiles,
                                  write_consensus_csv, write_grid_csv, write_profiles_csv)
from weightlens.bf16 import ProbeConfig
from weightlens.config import PipelineConfig, resolve_workers
from weightlens.errors import DomainError
from weightlens.geometry_masks import (MASK_FORMULA, export_checkpoint_masks, load_mask_archive, mask_filename,
                                       manifest_row, write_manifest)
from weightlens.local_threaded_executor import LocalThreadedExecutor
from weightlens.masks import read_mask, write_mask
from weightlens.memory import Memory, SQLiteMemory
from weightlens.probe import (ABSOLUTE_ATOL, SPARSITY_FORMULA, LayerSparsity, SparsityReport, absolute_change_count,
                              check_layer_sets, update_mask)
from weightlens.report import block, build_report, write_report, write_rows_csv
from weightlens.spectral import ANGLE_FORMULA, KYFAN_FORMULA, NSS_FORMULA, drift_report
from weightlens.tasks import LayerTask
from weightlens.tensor_io import CheckpointHandle, LayerFilter, load_matrix, open_checkpoint

logger = logging.getLogger(__name__)

STATE_DB = "state.db"
REPORT_NAME = "report.json"


def _run_stage(tasks: List[LayerTask], memory: Memory, workers: int, progress: bool,
               desc: str) -> Tuple[List[Optional[dict]], Dict[str, str]]:
    executor = LocalThreadedExecutor(tasks, memory=memory, max_concurrency=workers, progress=progress, desc=desc)
    executor.run()
    ids = {task.get_id() for task in tasks}
    errors = {task_id: error.splitlines()[0] for task_id, error in executor.errors().items() if task_id in ids}
    return executor.results(), errors


def _probe_layer(h0: CheckpointHandle, h1: CheckpointHandle, name: str, cfg: ProbeConfig, mask_dir: str,
                 filename: str, compare_absolute: bool, f32_exact: bool = False) -> dict:
    W0, W1 = load_matrix(h0, name), load_matrix(h1, name)
    mask = update_mask(W0, W1, cfg, f32_exact=f32_exact)
    write_mask(os.path.join(mask_dir, filename), mask)
    result = {"row": manifest_row(mask, filename), "rank": W0.data.ndim}
    if compare_absolute:
        result["absolute_changed"] = absolute_change_count(W0, W1, ABSOLUTE_ATOL)
    return result


def _analyze_layer(name: str, index: int, mask_paths: List[str], out_dir: str, window: int) -> dict:
    masks = [read_mask(p) for p in mask_paths]
    stem = mask_filename(index, name)[:-len(".mask")]
    profiles = [ratio_profiles(m, window) for m in masks]
    profile_files = []
    for r, p in enumerate(profiles):
        rel = os.path.join("profiles", f"{stem}.run{r}.csv")
        write_profiles_csv(os.path.join(out_dir, rel), p, step=r)
        profile_files.append(rel)
    result = {
        "name": name,
        "densities": [m.density for m in masks],
        "profiles": {
            "files": profile_files,
            "row_max": [float(p.rows.max()) for p in profiles],
            "col_max": [float(p.cols.max()) for p in profiles],
            "cross_run_alignment": profile_alignment(profiles),
        },
    }
    if len(masks) < 2:
        return result

    J = jaccard_matrix(masks)
    result["jaccard"] = {
        "matrix": J.tolist(),
        "mean_off_diagonal": mean_off_diagonal(J),
        "baseline": pairwise_baseline(result["densities"]),
    }
    cmap = consensus(masks)
    consensus_csv = os.path.join("consensus", f"{stem}.csv")
    grid_csv = os.path.join("consensus", f"{stem}.grid.csv")
    write_consensus_csv(os.path.join(out_dir, consensus_csv), cmap)
    write_grid_csv(os.path.join(out_dir, grid_csv), downsample_grid(cmap.ratios))
    result["consensus"] = {
        "runs": cmap.runs,
        "mean": cmap.mean(),
        "full_rows": cmap.full_rows(),
        "full_fraction": float(np.mean(cmap.counts == cmap.runs)),
        "files": [consensus_csv, grid_csv],
    }
    return result


def _fit_k(k: int, shape: Tuple[int, ...]) -> int:
    return min(k, min(shape) - 1)


def _spectral_layer(h0: CheckpointHandle, h1: CheckpointHandle, name: str, k: int,
                    kyfan_ks: List[int]) -> dict:
    W0, W1 = load_matrix(h0, name), load_matrix(h1, name)
    fitted = _fit_k(k, W0.shape)
    if fitted != k:
        logger.warning("k=%d does not fit %s %s; using k=%d", k, name, W0.shape, fitted)
    row = drift_report(W0, W1, fitted, [kk for kk in kyfan_ks if kk <= fitted] or None).to_dict()
    row["k_requested"] = k
    return row


def _overlap_rows(recipe_dir: str, run_masks: List[Dict[str, str]]) -> Tuple[List[dict], dict]:
    _, selections = load_mask_archive(recipe_dir)
    rows = []
    for run, paths in enumerate(run_masks):
        hit = updated = selected = total = 0
        for name, selection in selections.items():
            if name not in paths:
                continue
            updates = read_mask(paths[name])
            sel_bits, upd_bits = selection.bits, updates.bits
            hit += int(np.count_nonzero(sel_bits & upd_bits))
            updated += updates.changed
            selected += selection.changed
            total += selection.total
            try:
                overlap = overlap_ratio(selection, updates)
            except DomainError as e:
                logger.warning("%s", e)
                continue
            rows.append({"run": run, "name": name, "overlap": overlap.ratio, "baseline": overlap.baseline,
                         "classification": overlap.classification})
        summary_ratio = hit / updated if updated else None
        summary_baseline = selected / total if total else None
        rows.append({"run": run, "name": "*", "overlap": summary_ratio, "baseline": summary_baseline,
                     "classification": None})
    summary = {r["run"]: {"overlap": r["overlap"], "baseline": r["baseline"]} for r in rows if r["name"] == "*"}
    return rows, summary


def run_pipeline(cfg: PipelineConfig, progress: bool = False) -> dict:
    """
    Probe, analyze and export everything the configuration asks for.

    :param cfg: Validated here; every problem is reported at once
    :param progress: Show per-stage progress bars
    :return: The report, also written to ``<output_dir>/report.json``
    :raises ConfigError: when the configuration is invalid
    :raises SchemaError: when a run does not expose the base's layers
    """
    cfg.validate()
    out_dir = os.fspath(cfg.output_dir)
    os.makedirs(out_dir, exist_ok=True)
    memory = SQLiteMemory(os.path.join(out_dir, STATE_DB))
    if memory.bind(cfg.fingerprint()):
        logger.info("Resuming from %s", memory.path)
    workers = resolve_workers(cfg.workers)
    f = cfg.layer_filter()
    probe_cfg = cfg.probe_config()

    h0 = open_checkpoint(cfg.base)
    runs = [open_checkpoint(p) for p in cfg.finetuned]
    names = check_layer_sets(h0, runs[0], f)
    for h in runs[1:]:
        check_layer_sets(h0, h, f)

    # Update masks, one archive per run.
    probe_tasks = []
    for r, h1 in enumerate(runs):
        mask_dir = os.path.join(out_dir, "masks", f"run{r}")
        os.makedirs(mask_dir, exist_ok=True)
        for i, name in enumerate(names):
            probe_tasks.append(LayerTask(f"probe/run{r}/{name}", _probe_layer,
                                         (h0, h1, name, probe_cfg, mask_dir, mask_filename(i, name),
                                          cfg.compare_absolute, cfg.f32_exact), layer_name=name, kind="probe"))
    probe_results, probe_errors = _run_stage(probe_tasks, memory, workers, progress, "Probing")

    failed: Dict[str, str] = dict(probe_errors)
    sparsity_runs = []
    sparsity_rows = []
    run_masks: List[Dict[str, str]] = []
    ranks: Dict[str, int] = {}
    for r in range(len(runs)):
        results = probe_results[r * len(names):(r + 1) * len(names)]
        mask_dir = os.path.join(out_dir, "masks", f"run{r}")
        layers, rows, paths = [], [], OrderedDict()
        for name, result in zip(names, results):
            if result is None:
                continue
            row = result["row"]
            ranks[name] = result["rank"]
            layers.append(LayerSparsity(name, row["count"], row["shape"][0] * row["shape"][1], result["rank"],
                                        result.get("absolute_changed")))
            rows.append(row)
            paths[name] = os.path.join(mask_dir, row["file"])
        write_manifest(mask_dir, rows, {"kind": "update", "eta": probe_cfg.eta,
                                        "zero_policy": probe_cfg.zero_policy.value,
                                        "base": cfg.base, "finetuned": cfg.finetuned[r]}, cfg.seed)
        report = SparsityReport(layers=layers, eta=probe_cfg.eta, filter=f,
                                failed={t.split("/", 2)[2]: e for t, e in probe_errors.items()
                                        if t.startswith(f"probe/run{r}/")})
        values = report.to_dict()
        values.update({"run": r, "path": cfg.finetuned[r], "masks": os.path.join("masks", f"run{r}")})
        sparsity_runs.append(values)
        sparsity_rows.extend({"run": r, **layer.to_dict()} for layer in layers)
        run_masks.append(paths)
        logger.info("Run %d: sparsity_bf16 = %.6f", r, report.sparsity_bf16)

    # Cross-run analytics on layers every run probed.
    complete = [name for name in names if all(name in paths for paths in run_masks)]
    analytics_tasks = [
        LayerTask(f"analytics/{name}", _analyze_layer,
                  (name, names.index(name), [paths[name] for paths in run_masks], out_dir, cfg.window),
                  layer_name=name, kind="analytics")
        for name in complete
    ]
    for sub in ("consensus", "profiles"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    analytics_results, analytics_errors = _run_stage(analytics_tasks, memory, workers, progress, "Analytics")
    failed.update(analytics_errors)
    analytics = [r for r in analytics_results if r is not None]

    blocks = OrderedDict()
    blocks["sparsity"] = block("sparsity_bf16", SPARSITY_FORMULA, {"runs": sparsity_runs})
    if len(runs) >= 2:
        jaccard_rows = [{"name": a["name"], "densities": a["densities"], **a["jaccard"]} for a in analytics]
        blocks["jaccard"] = block("jaccard_matrix", f"{JACCARD_FORMULA}; baseline {BASELINE_FORMULA}",
                                  {"layers": jaccard_rows})
        blocks["consensus"] = block("consensus", CONSENSUS_FORMULA,
                                    {"layers": [{"name": a["name"], **a["consensus"]} for a in analytics]})
    blocks["profiles"] = block("ratio_profiles", PROFILE_FORMULA,
                               {"window": cfg.window,
                                "layers": [{"name": a["name"], **a["profiles"]} for a in analytics]})

    # Spectral drift per run, layer and k.
    spectral_rows = []
    if cfg.spectral:
        matrix_names = [n for n in complete if ranks.get(n) == 2]
        spectral_tasks = [
            LayerTask(f"spectral/run{r}/k{k}/{name}", _spectral_layer, (h0, h1, name, k, list(cfg.kyfan_k)),
                      layer_name=name, kind="spectral")
            for r, h1 in enumerate(runs) for k in cfg.k for name in matrix_names
        ]
        spectral_results, spectral_errors = _run_stage(spectral_tasks, memory, workers, progress, "Spectral")
        failed.update(spectral_errors)
        for task, result in zip(spectral_tasks, spectral_results):
            if result is not None:
                spectral_rows.append({"run": int(task.get_id().split("/")[1][3:]), **result})
        blocks["spectral_drift"] = block("drift_report", f"{NSS_FORMULA}; {KYFAN_FORMULA}; {ANGLE_FORMULA}",
                                         {"rows": spectral_rows})

    # Geometric masks from the base, and their overlap with every run's updates.
    recipe_values, overlap_rows = [], []
    if cfg.recipes:
        references = {name: read_mask(path) for name, path in run_masks[0].items()}
        matrix_filter = LayerFilter(include=f.include, exclude=f.exclude, min_rank=2)
        for j, recipe in enumerate(cfg.mask_recipes()):
            rel = os.path.join("masks", f"recipe{j}_{recipe.kind.value}")
            manifest = export_checkpoint_masks(h0, os.path.join(out_dir, rel), recipe, matrix_filter,
                                               references=references, max_workers=workers)
            for name, error in manifest.get("failed", {}).items():
                failed[f"masks/recipe{j}/{name}"] = error
            rows, summary = _overlap_rows(os.path.join(out_dir, rel), run_masks)
            overlap_rows.extend({"recipe": j, "kind": recipe.kind.value, **row} for row in rows)
            recipe_values.append({"recipe": recipe.to_dict(), "archive": rel, "total_count": manifest["total_count"],
                                  "total_density": manifest["total_density"], "overlap_by_run": summary})
        blocks["masks"] = block("export_masks", MASK_FORMULA, {"recipes": recipe_values})
        blocks["overlaps"] = block("overlap_ratio", OVERLAP_FORMULA,
                                   {"rows": [r for r in overlap_rows if r["name"] != "*"],
                                    "summary": [r for r in overlap_rows if r["name"] == "*"]})

    write_rows_csv(os.path.join(out_dir, "sparsity.csv"), sparsity_rows,
                   ["run", "name", "rank", "changed", "total", "sparsity", "absolute_changed", "absolute_sparsity"])
    if spectral_rows:
        write_rows_csv(os.path.join(out_dir, "spectral.csv"), spectral_rows,
                       ["run", "name", "k", "k_requested", "max_angle_left_deg", "max_angle_right_deg",
                        "nss_full", "nss_topk", "kyfan", "weyl_max", "hoffman_wielandt", "gap0", "gap1"])
    if overlap_rows:
        write_rows_csv(os.path.join(out_dir, "overlaps.csv"), overlap_rows,
                       ["recipe", "kind", "run", "name", "overlap", "baseline", "classification"])

    seeds = {"root": cfg.seed}
    seeds.update({f"recipe/{j}": r.seed for j, r in enumerate(cfg.mask_recipes())})
    blocks["failures"] = block("run_pipeline", "per-layer task errors", dict(sorted(failed.items())))
    echo = cfg.to_dict()
    echo.pop("workers")
    report = build_report("pipeline", echo, seeds, blocks)
    write_report(os.path.join(out_dir, REPORT_NAME), report)
    if failed:
        logger.warning("%d layer tasks failed; see the failures block of %s", len(failed), REPORT_NAME)
    return report
