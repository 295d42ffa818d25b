"""
Command-line entry point.

Every subcommand prints (or writes with ``--report``) one JSON report.
Exit codes: 0 success, 1 findings (bound violations, failed invariance or
scorecard, failed layers), 2 configuration error, 3 input or I/O error.
"""
import argparse
import logging
import os
import sys
from collections import OrderedDict
from typing import Dict, List, Optional, Sequence

from weightlens import __version__
from weightlens.analytics import (BASELINE_FORMULA, CONSENSUS_FORMULA, JACCARD_FORMULA, OVERLAP_FORMULA,
                                  PROFILE_FORMULA, consensus, downsample_grid, jaccard_matrix, mean_off_diagonal,
                                  overlap_ratio, pairwise_baseline, profile_alignment, profile_series,
                                  write_consensus_csv, write_grid_csv, write_profiles_csv)
from weightlens.bf16 import ProbeConfig, ZeroPolicy
from weightlens.config import PipelineConfig, apply_overrides, derive_seed, load_config, resolve_workers
from weightlens.errors import (ConfigError, DomainError, DtypeError, IntegrityError, NotFound, ParseError,
                               SchemaError, ShapeError, UnsupportedDtype)
from weightlens.geometry_masks import MASK_FORMULA, MaskKind, MaskRecipe, export_checkpoint_masks, load_mask_archive
from weightlens.intervention import (HeadLayout, intervene_checkpoint, invariance_suite, load_attention_block,
                                     verify_invariance)
from weightlens.pipeline import run_pipeline
from weightlens.probe import SPARSITY_FORMULA, check_layer_sets, export_update_masks, sparsity_bf16
from weightlens.report import block, build_report, dumps_report, write_report, write_rows_csv
from weightlens.spectral import (ANGLE_FORMULA, DEFAULT_K, KYFAN_FORMULA, NSS_FORMULA, drift_report,
                                 run_bound_trials, verify_perturbation_bounds)
from weightlens.tensor_io import LayerFilter, load_matrix, open_checkpoint
from weightlens.theory import theory_scorecard

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FINDINGS = 1
EXIT_CONFIG = 2
EXIT_INPUT = 3

_INPUT_ERRORS = (OSError, ParseError, IntegrityError, NotFound, SchemaError, ShapeError, DtypeError, UnsupportedDtype,
                 DomainError)


class Result:
    """Report blocks of one command plus whether they contain findings."""

    def __init__(self, blocks: Dict[str, dict], findings: bool = False, seeds: Optional[Dict[str, int]] = None):
        self.blocks = blocks
        self.findings = findings
        self.seeds = seeds or {}


def _layer_filter(args) -> LayerFilter:
    include = tuple(args.include or ["*"])
    if args.all_layers:
        return LayerFilter(include=include, exclude=tuple(args.exclude or ()), min_rank=1)
    exclude = tuple(args.exclude) if args.exclude else LayerFilter.linear_only().exclude
    return LayerFilter(include=include, exclude=exclude, min_rank=2)


def _probe_config(args) -> ProbeConfig:
    return ProbeConfig(eta=args.eta, zero_policy=ZeroPolicy(args.zero_policy))


def _layout(args) -> HeadLayout:
    return HeadLayout(args.head_dim, args.q_heads, args.kv_heads)


def _load_archives(dirs: Sequence[str]):
    archives = [load_mask_archive(d)[1] for d in dirs]
    common = [name for name in archives[0] if all(name in a for a in archives[1:])]
    dropped = sorted(set().union(*(a.keys() for a in archives)) - set(common))
    if dropped:
        logger.warning("%d layers are missing from some archives and were skipped", len(dropped))
    return archives, common


# Probe


def cmd_sparsity(args) -> Result:
    h0, h1 = open_checkpoint(args.base), open_checkpoint(args.finetuned)
    report = sparsity_bf16(h0, h1, _layer_filter(args), _probe_config(args), max_workers=args.workers,
                           compare_absolute=args.absolute, f32_exact=args.f32_exact, progress=args.progress)
    if args.csv:
        write_rows_csv(args.csv, [layer.to_dict() for layer in report.layers],
                       ["name", "rank", "changed", "total", "sparsity", "absolute_changed", "absolute_sparsity"])
    return Result({"sparsity": block("sparsity_bf16", SPARSITY_FORMULA, report.to_dict())}, bool(report.failed))


def cmd_mask(args) -> Result:
    h0, h1 = open_checkpoint(args.base), open_checkpoint(args.finetuned)
    manifest = export_update_masks(h0, h1, args.out, _layer_filter(args), _probe_config(args),
                                   max_workers=args.workers, f32_exact=args.f32_exact, progress=args.progress)
    return Result({"masks": block("update_mask", SPARSITY_FORMULA, manifest)}, bool(manifest.get("failed")))


# Mask analytics


def cmd_jaccard(args) -> Result:
    archives, names = _load_archives(args.archives)
    rows = []
    for name in names:
        masks = [a[name] for a in archives]
        J = jaccard_matrix(masks)
        densities = [m.density for m in masks]
        rows.append({"name": name, "densities": densities, "matrix": J.tolist(),
                     "mean_off_diagonal": mean_off_diagonal(J), "baseline": pairwise_baseline(densities)})
    if args.csv:
        write_rows_csv(args.csv, rows, ["name", "mean_off_diagonal", "baseline", "densities"])
    return Result({"jaccard": block("jaccard_matrix", f"{JACCARD_FORMULA}; baseline {BASELINE_FORMULA}",
                                    {"archives": list(args.archives), "layers": rows})})


def cmd_consensus(args) -> Result:
    archives, names = _load_archives(args.archives)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
    rows = []
    for i, name in enumerate(names):
        cmap = consensus([a[name] for a in archives])
        row = {"name": name, "runs": cmap.runs, "mean": cmap.mean(), "full_rows": cmap.full_rows()}
        if args.out:
            stem = os.path.join(args.out, f"{i:05d}")
            write_consensus_csv(f"{stem}.csv", cmap)
            write_grid_csv(f"{stem}.grid.csv", downsample_grid(cmap.ratios, args.max_side))
            row["files"] = [f"{stem}.csv", f"{stem}.grid.csv"]
        rows.append(row)
    return Result({"consensus": block("consensus", CONSENSUS_FORMULA, {"layers": rows})})


def cmd_profiles(args) -> Result:
    archives, names = _load_archives(args.archives)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
    rows = []
    for i, name in enumerate(names):
        series = profile_series([a[name] for a in archives], args.window)
        if args.out:
            for step, profiles in enumerate(series):
                write_profiles_csv(os.path.join(args.out, f"{i:05d}.step{step}.csv"), profiles, step=step)
        rows.append({"name": name, "row_max": [float(p.rows.max()) for p in series],
                     "col_max": [float(p.cols.max()) for p in series], "alignment": profile_alignment(series)})
    return Result({"profiles": block("ratio_profiles", PROFILE_FORMULA, {"window": args.window, "layers": rows})})


def cmd_overlap(args) -> Result:
    _, selections = load_mask_archive(args.selection)
    _, updates = load_mask_archive(args.updates)
    rows = []
    for name, selection in selections.items():
        if name not in updates:
            continue
        try:
            overlap = overlap_ratio(selection, updates[name])
        except DomainError as e:
            logger.warning("%s", e)
            continue
        rows.append({"name": name, "overlap": overlap.ratio, "baseline": overlap.baseline,
                     "classification": overlap.classification})
    if args.csv:
        write_rows_csv(args.csv, rows, ["name", "overlap", "baseline", "classification"])
    return Result({"overlaps": block("overlap_ratio", OVERLAP_FORMULA, {"layers": rows})})


# Spectral


def cmd_spectral(args) -> Result:
    h0, h1 = open_checkpoint(args.base), open_checkpoint(args.finetuned)
    rows, failed = [], {}
    for name in check_layer_sets(h0, h1, _layer_filter(args)):
        W0, W1 = load_matrix(h0, name), load_matrix(h1, name)
        if W0.data.ndim != 2:
            continue
        k = min(args.k, min(W0.shape) - 1)
        try:
            rows.append(drift_report(W0, W1, k, [kk for kk in args.kyfan_k if kk <= k] or None).to_dict())
        except (ConfigError, ArithmeticError) as e:
            logger.error("Spectral drift failed for %s: %s", name, e)
            failed[name] = str(e)
    if args.csv:
        write_rows_csv(args.csv, rows, ["name", "k", "max_angle_left_deg", "max_angle_right_deg", "nss_full",
                                        "nss_topk", "kyfan", "weyl_max", "hoffman_wielandt", "gap0", "gap1"])
    return Result({"spectral_drift": block("drift_report", f"{NSS_FORMULA}; {KYFAN_FORMULA}; {ANGLE_FORMULA}",
                                           {"rows": rows, "failed": failed})}, bool(failed))


def cmd_bounds(args) -> Result:
    if args.base:
        h0, h1 = open_checkpoint(args.base), open_checkpoint(args.finetuned)
        reports = []
        for name in check_layer_sets(h0, h1, _layer_filter(args)):
            W0 = load_matrix(h0, name)
            if W0.data.ndim != 2:
                continue
            A0 = W0.to_float64()
            k = min(args.k, min(A0.shape) - 1)
            reports.append(verify_perturbation_bounds(W0, load_matrix(h1, name).to_float64() - A0, k).to_dict())
        findings = not all(r["passed"] for r in reports)
        return Result({"bounds": block("verify_perturbation_bounds", "Wedin, Weyl, Hoffman-Wielandt, Ky Fan",
                                       {"layers": reports})}, findings)
    seed = derive_seed(args.seed, "bounds")
    summary = run_bound_trials(args.trials, args.size, min(args.k, args.size - 1), seed, progress=args.progress)
    return Result({"bounds": block("run_bound_trials", "Wedin, Weyl, Hoffman-Wielandt, Ky Fan", summary)},
                  summary["total_violations"] > 0, {"bounds": seed})


# Geometric masks


def _recipe(args, kind: str) -> MaskRecipe:
    return MaskRecipe(kind=kind, k=args.k, alpha=args.alpha, alpha_low=args.alpha_low,
                      seed=derive_seed(args.seed, f"masks/{kind}"))


def _export(args, recipe: MaskRecipe) -> Result:
    h = open_checkpoint(args.base)
    references = None
    if recipe.kind is MaskKind.RANDOM_MATCHED:
        if not args.reference:
            raise ConfigError("random_matched masks need --reference <mask archive>")
        references = load_mask_archive(args.reference)[1]
    f = _layer_filter(args)
    f = LayerFilter(include=f.include, exclude=f.exclude, min_rank=2)
    manifest = export_checkpoint_masks(h, args.out, recipe, f, references, max_workers=args.workers,
                                       progress=args.progress)
    return Result({"masks": block("export_masks", MASK_FORMULA, manifest)}, bool(manifest.get("failed")),
                  {"masks": recipe.seed})


def cmd_principal_mask(args) -> Result:
    return _export(args, _recipe(args, MaskKind.PRINCIPAL.value))


def cmd_export_masks(args) -> Result:
    return _export(args, _recipe(args, args.kind))


# Interventions


def cmd_intervene(args) -> Result:
    seed = derive_seed(args.seed, "intervene")
    provenance = intervene_checkpoint(open_checkpoint(args.checkpoint), args.out, args.block, _layout(args),
                                      args.kind, seed)
    return Result({"intervention": block("intervene_checkpoint", "W_v R_kv, W_o R_q; head permutation",
                                         provenance)}, seeds={"intervene": seed})


def cmd_verify_invariance(args) -> Result:
    seed = derive_seed(args.seed, "verify-invariance")
    if args.original:
        layout = _layout(args)
        h0, h1 = open_checkpoint(args.original), open_checkpoint(args.edited)
        rows = []
        for prefix in args.block:
            w0, _, _ = load_attention_block(h0, prefix, layout)
            w1, _, _ = load_attention_block(h1, prefix, layout)
            report = verify_invariance(w0, w1, layout, trials=args.trials, tol=args.tol, seed=seed)
            rows.append({"block": prefix, **report.to_dict()})
        passed = all(r["passed"] for r in rows)
        values = {"blocks": rows, "passed": passed}
    else:
        values = invariance_suite(args.configs, seed)
        passed = values["passed"]
    return Result({"invariance": block("verify_invariance", "max |f(X; W) - f(X; W')|", values)}, not passed,
                  {"verify-invariance": seed})


def cmd_theory_check(args) -> Result:
    seed = derive_seed(args.seed, "theory-check")
    card = theory_scorecard(seed, args.kl_trials, args.clip_batches, args.bound_trials, progress=args.progress)
    return Result({"theory": block("theory_scorecard", "see per-check formula", card)}, not card["passed"],
                  {"theory-check": seed})


def cmd_pipeline(args) -> Result:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    apply_overrides(cfg, {
        "base": args.base, "finetuned": args.finetuned, "output_dir": args.output_dir, "eta": args.eta,
        "k": args.k, "f32_exact": args.f32_exact or None,
        "seed": args.seed if args.seed_given else None, "workers": args.workers_flag,
    })
    report = run_pipeline(cfg, progress=args.progress)
    args.pipeline_report = report
    return Result(report["blocks"], bool(report["blocks"]["failures"]["values"]), report["seeds"])


# Parser


def _add_filter_flags(p: argparse.ArgumentParser):
    p.add_argument("--include", action="append", help="Glob of layer names to keep (repeatable)")
    p.add_argument("--exclude", action="append", help="Glob of layer names to drop (repeatable)")
    p.add_argument("--all", dest="all_layers", action="store_true",
                   help="Keep embeddings, LM head and rank-1 tensors too")


def _add_probe_flags(p: argparse.ArgumentParser):
    p.add_argument("--eta", type=float, default=1e-3, help="Relative tolerance, below 2^-9")
    p.add_argument("--zero-policy", choices=[z.value for z in ZeroPolicy], default=ZeroPolicy.BITWISE.value)
    p.add_argument("--f32-exact", action="store_true", help="Compare f32 checkpoints by exact equality")


def _add_recipe_flags(p: argparse.ArgumentParser):
    p.add_argument("base")
    p.add_argument("--out", required=True, help="Mask archive directory")
    p.add_argument("--k", type=int, default=DEFAULT_K)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--alpha-low", type=float, default=None)
    p.add_argument("--reference", help="Mask archive whose per-layer counts random_matched masks copy")
    _add_filter_flags(p)


def _add_layout_flags(p: argparse.ArgumentParser, required: bool = True):
    p.add_argument("--block", action="append", required=required,
                   help="Attention module prefix, e.g. model.layers.20.self_attn (repeatable)")
    p.add_argument("--head-dim", type=int, required=required)
    p.add_argument("--q-heads", type=int, required=required)
    p.add_argument("--kv-heads", type=int, required=required)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weightlens", description="Diagnose what fine-tuning did to model weights.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("-v", "--verbose", action="store_true", help="Shorthand for --log-level INFO")
    parser.add_argument("--workers", type=int, default=None, help="Worker threads (default $WEIGHTLENS_WORKERS or 4)")
    parser.add_argument("--seed", type=int, default=None, help="Root seed (default 0)")
    parser.add_argument("--report", help="Write the JSON report here instead of stdout")
    parser.add_argument("--progress", action="store_true", help="Show progress bars on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sparsity", help="Update sparsity between two checkpoints")
    p.add_argument("base")
    p.add_argument("finetuned")
    p.add_argument("--absolute", action="store_true", help="Also count changes under the fixed 1e-5 rule")
    p.add_argument("--csv", help="Per-layer rows as CSV")
    _add_probe_flags(p)
    _add_filter_flags(p)
    p.set_defaults(func=cmd_sparsity)

    p = sub.add_parser("mask", help="Export per-layer update masks")
    p.add_argument("base")
    p.add_argument("finetuned")
    p.add_argument("--out", required=True, help="Mask archive directory")
    _add_probe_flags(p)
    _add_filter_flags(p)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("jaccard", help="Pairwise Jaccard overlap of update masks across runs")
    p.add_argument("archives", nargs="+")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_jaccard, min_archives=2)

    p = sub.add_parser("consensus", help="Per-coordinate consensus across runs")
    p.add_argument("archives", nargs="+")
    p.add_argument("--out", help="Directory for per-layer CSVs")
    p.add_argument("--max-side", type=int, default=256, help="Grid CSV downsampling limit")
    p.set_defaults(func=cmd_consensus, min_archives=2)

    p = sub.add_parser("profiles", help="Row and column update-ratio profiles")
    p.add_argument("archives", nargs="+", help="Mask archives in step order")
    p.add_argument("--window", type=int, default=3)
    p.add_argument("--out", help="Directory for per-layer CSVs")
    p.set_defaults(func=cmd_profiles, min_archives=1)

    p = sub.add_parser("spectral", help="Spectral drift per layer")
    p.add_argument("base")
    p.add_argument("finetuned")
    p.add_argument("--k", type=int, default=DEFAULT_K)
    p.add_argument("--kyfan-k", type=int, action="append", default=[])
    p.add_argument("--csv")
    _add_filter_flags(p)
    p.set_defaults(func=cmd_spectral)

    p = sub.add_parser("bounds", help="Check perturbation inequalities on random trials or a checkpoint pair")
    p.add_argument("base", nargs="?")
    p.add_argument("finetuned", nargs="?")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--k", type=int, default=8)
    _add_filter_flags(p)
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("principal-mask", help="Principal-weight masks of a base checkpoint")
    _add_recipe_flags(p)
    p.set_defaults(func=cmd_principal_mask)

    p = sub.add_parser("export-masks", help="Geometric masks of any kind")
    _add_recipe_flags(p)
    p.add_argument("--kind", choices=[k.value for k in MaskKind], default=MaskKind.SAFE.value)
    p.set_defaults(func=cmd_export_masks)

    p = sub.add_parser("overlap", help="Overlap of a selection archive with an update archive")
    p.add_argument("selection")
    p.add_argument("updates")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_overlap)

    p = sub.add_parser("intervene", help="Write a function-preserving edit of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", action="append", choices=["rotate", "permute"], required=True)
    _add_layout_flags(p)
    p.set_defaults(func=cmd_intervene)

    p = sub.add_parser("verify-invariance", help="Toy invariance suite, or compare two checkpoints' blocks")
    p.add_argument("original", nargs="?")
    p.add_argument("edited", nargs="?")
    p.add_argument("--configs", type=int, default=50)
    p.add_argument("--trials", type=int, default=8)
    p.add_argument("--tol", type=float, default=1e-2, help="Output tolerance for checkpoint comparisons")
    _add_layout_flags(p, required=False)
    p.set_defaults(func=cmd_verify_invariance)

    p = sub.add_parser("theory-check", help="Categorical Fisher/KL theory scorecard")
    p.add_argument("--kl-trials", type=int, default=100)
    p.add_argument("--clip-batches", type=int, default=10_000)
    p.add_argument("--bound-trials", type=int, default=100)
    p.set_defaults(func=cmd_theory_check)

    p = sub.add_parser("pipeline", help="Full analysis from a YAML config; flags override the file")
    p.add_argument("--config")
    p.add_argument("--base")
    p.add_argument("--finetuned", action="append")
    p.add_argument("--output-dir")
    p.add_argument("--eta", type=float)
    p.add_argument("--k", type=int, action="append")
    p.add_argument("--f32-exact", action="store_true", help="Compare f32 checkpoints by exact equality")
    p.set_defaults(func=cmd_pipeline)
    return parser


def _check_args(args):
    problems = []
    if len(getattr(args, "archives", [])) < getattr(args, "min_archives", 0):
        problems.append(f"{args.command} needs at least {args.min_archives} mask archives")
    if args.command == "bounds" and bool(args.base) != bool(args.finetuned):
        problems.append("bounds takes either no checkpoints or both base and finetuned")
    if args.command == "verify-invariance" and args.original:
        if not args.edited:
            problems.append("verify-invariance needs both original and edited checkpoints")
        if not (args.block and args.head_dim and args.q_heads and args.kv_heads):
            problems.append("checkpoint comparison needs --block, --head-dim, --q-heads and --kv-heads")
    if problems:
        raise ConfigError(f"{len(problems)} argument problem(s)", problems)


def _configure_logging(args):
    level = "INFO" if args.verbose and args.log_level == "WARNING" else args.log_level
    logging.basicConfig(level=getattr(logging, level), format="%(asctime)s %(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args)
    try:
        _check_args(args)
        args.seed_given = args.seed is not None
        args.seed = args.seed if args.seed is not None else 0
        args.workers_flag = args.workers
        args.workers = resolve_workers(args.workers)
        result = args.func(args)
        report = getattr(args, "pipeline_report", None)
        if report is None:
            echo = OrderedDict((k, v) for k, v in sorted(vars(args).items())
                               if k not in ("func", "report", "progress", "workers", "workers_flag", "seed_given",
                                            "verbose", "log_level", "min_archives"))
            report = build_report(args.command, echo, {"root": args.seed, **result.seeds}, result.blocks)
        if args.report:
            write_report(args.report, report)
        else:
            sys.stdout.write(dumps_report(report))
    except ConfigError as e:
        for problem in e.problems:
            print(f"weightlens: config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except _INPUT_ERRORS as e:
        print(f"weightlens: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_FINDINGS if result.findings else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
