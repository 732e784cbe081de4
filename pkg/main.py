"""ENCAS Cascade Search - Main Script

Searches for Pareto-optimal cascades of pre-evaluated classifiers (accuracy up, expected MFLOPs down)
over precomputed prediction pools.

Features:
- Pool tooling: validate, synthesize, merge, split and convert prediction pools
- Cascade search with MO-GOMEA, random search, exhaustive enumeration or the greedy baseline
- Ensemble mode (ENENS) restricting genomes to model indices
- Evaluation of a single genome on the validation or test split
- Front analysis: hypervolume, filtering, representative models, CSV export
- A reproducibility manifest next to every output

Usage:
    python main.py pool synth spec.json pools/synth
    python main.py pool validate pools/synth/pool.json
    python main.py search pools/synth/pool.json --backend mogomea --budget 600000 --k 5 --seed 1 -o front.json
    python main.py eval pools/synth/pool.json '{"models": [3, 7], "thresholds": [0.8]}' --split val
    python main.py analyze hv front.json
    python main.py analyze representative front.json

Exit codes: 0 success, 1 failure (invalid pool, genome or search), 2 usage error.
"""

import argparse
import csv
import dataclasses
import io
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from cascade_eval import (
    CONFIDENCE_MODES, GENOME_MODES, CascadeEvaluator, CascadeGenome, ThresholdGrid, decode, genome_from_json,
)
from config import Config
from evo_search import BACKENDS, SearchConfig, SearchResult, search
from greedy_baseline import ANCHOR_MODES, LABEL as GREEDY_LABEL, GreedyCascadeSearch, GreedyConfig
from pareto_tools import (
    FrontEntry, HypervolumeConfig, ObjectivePoint, filter_front, front_to_csv, hypervolume, max_accuracy_point,
    median_run, nondominated_front, read_front, representative_subset, write_front, write_front_csv,
)
from pool_io import (
    ModelPool, PoolError, SynthPoolSpec, load_pool, merge_pools, pool_digest, split_pool, synth_pool, write_pool,
)
from run_manifest import RunManifest, atomic_write_json, atomic_write_text

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class UsageError(Exception):
    """Arguments are well-formed for argparse but inconsistent with each other."""


# -----------------------------------------------------------------------------
# Shared helpers
# -----------------------------------------------------------------------------
def _parse_grid(text: Optional[str]) -> ThresholdGrid:
    if not text:
        return ThresholdGrid.default()
    try:
        return ThresholdGrid(tuple(float(v) for v in text.split(',')))
    except ValueError as e:
        raise UsageError(f"Invalid --grid '{text}': {e}") from e


def _args_echo(args: argparse.Namespace) -> Dict[str, Any]:
    return {key: value for key, value in vars(args).items()
            if key not in ('handler', 'command_line') and isinstance(value, (str, int, float, bool, list, type(None)))}


def _split(args: argparse.Namespace, pool: ModelPool) -> Tuple[ModelPool, Optional[ModelPool]]:
    """(validation, test) pools; without --split-fraction the whole pool is validation and there is no test."""
    if args.split_fraction is None:
        return pool, None
    if args.split_seed is None:
        raise UsageError("--split-fraction requires an explicit --split-seed")
    return split_pool(pool, args.split_fraction, args.split_seed)


def _add_split_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--split-fraction', type=float, default=None,
                        help='Fraction of samples in the validation split (default: whole pool is validation)')
    parser.add_argument('--split-seed', type=int, default=None, help='Seed of the validation/test partition')


def _print_banner(title: str) -> None:
    print("\n" + "=" * 70)
    print(title)
    print("=" * 70)


# -----------------------------------------------------------------------------
# pool
# -----------------------------------------------------------------------------
def cmd_pool(args: argparse.Namespace) -> int:
    action = args.pool_command

    if action == 'validate':
        try:
            pool = load_pool(args.manifest)
        except (PoolError, OSError) as e:
            print(f"FAILED: {e}")
            return EXIT_FAILURE
        print(f"OK: N={pool.num_models} S={pool.num_samples} C={pool.num_classes}")
        return EXIT_OK

    manifest = RunManifest.start(_args_echo(args), command=args.command_line)
    if action == 'synth':
        data = json.loads(Path(args.spec).read_text(encoding='utf-8'))
        if args.seed is not None:
            data['seed'] = args.seed
        if 'seed' not in data:
            raise UsageError("pool synth needs a seed in the spec file or via --seed")
        spec = SynthPoolSpec.from_dict(data)
        manifest.seed = spec.seed
        pools = {args.out: synth_pool(spec)}
    elif action == 'merge':
        inputs = [load_pool(path) for path in args.manifests]
        manifest.pool_hashes = {path: pool_digest(pool) for path, pool in zip(args.manifests, inputs)}
        pools = {args.out: merge_pools(inputs)}
    elif action == 'split':
        source = load_pool(args.manifest)
        manifest.pool_hashes = {args.manifest: pool_digest(source)}
        manifest.seed = args.seed
        val, test = split_pool(source, args.fraction, args.seed)
        pools = {str(Path(args.out) / 'val'): val, str(Path(args.out) / 'test'): test}
    elif action == 'convert':
        source = load_pool(args.manifest)
        manifest.pool_hashes = {args.manifest: pool_digest(source)}
        pools = {args.out: source}
    else:
        raise UsageError(f"Unknown pool command '{action}'")

    for directory, pool in pools.items():
        path = write_pool(pool, directory)
        manifest.write(path)
        print(f"Wrote pool '{pool.name}' (N={pool.num_models} S={pool.num_samples} C={pool.num_classes}) to {path}")
    return EXIT_OK


# -----------------------------------------------------------------------------
# search
# -----------------------------------------------------------------------------
def _search_config(args: argparse.Namespace) -> SearchConfig:
    """Config defaults, overlaid by the --config file, overlaid by explicit flags."""
    cfg = SearchConfig.from_config(Config())
    if args.config:
        cfg = SearchConfig.from_dict(json.loads(Path(args.config).read_text(encoding='utf-8')), cfg)
    overrides = {
        'budget': args.budget,
        'k': args.k,
        'confidence_mode': args.confidence_mode,
        'seed': args.seed,
        'population_size': args.population_size,
        'cluster_count': args.cluster_count,
        'mode': args.mode,
        'workers': args.workers,
        'exhaustive_limit': args.exhaustive_limit,
        'archive_capacity': args.archive_capacity,
    }
    if args.backend != 'greedy':
        overrides['backend'] = args.backend
    if args.grid:
        overrides['grid'] = _parse_grid(args.grid)
    if args.no_seed_singletons:
        overrides['seed_singletons'] = False
    if args.ref_mflops is not None or args.ref_accuracy is not None:
        overrides['hv_config'] = HypervolumeConfig(
            ref_mflops=args.ref_mflops if args.ref_mflops is not None else cfg.hv_config.ref_mflops,
            ref_accuracy=args.ref_accuracy if args.ref_accuracy is not None else cfg.hv_config.ref_accuracy,
        )
    return dataclasses.replace(cfg, **{key: value for key, value in overrides.items() if value is not None})


def _run_greedy(pool: ModelPool, cfg: SearchConfig, args: argparse.Namespace) -> Tuple[SearchResult, Dict[str, Any]]:
    if cfg.mode != 'cascade':
        raise UsageError("The greedy backend only builds cascades; drop --mode ensemble")
    # --k bounds the greedy cascade only when given explicitly
    max_stages = args.k if args.k is not None else GreedyConfig().max_stages
    greedy_cfg = GreedyConfig(grid=cfg.grid, max_stages=max_stages, anchors=args.anchors,
                              top_fraction=args.top_fraction, confidence_mode=cfg.confidence_mode,
                              workers=cfg.workers)
    searcher = GreedyCascadeSearch(pool, greedy_cfg)
    front = searcher.run()
    result = SearchResult(front, searcher.evaluations_used, [hypervolume(front, cfg.hv_config)], GREEDY_LABEL)
    run_log = result.run_log(cfg)
    run_log['greedy'] = {'max_stages': greedy_cfg.max_stages, 'anchors': greedy_cfg.anchors,
                         'top_fraction': greedy_cfg.top_fraction}
    return result, run_log


def cmd_search(args: argparse.Namespace) -> int:
    cfg = _search_config(args)
    cfg.validate()
    pool = load_pool(args.pool)
    val_pool, _ = _split(args, pool)

    manifest = RunManifest.start(cfg.to_dict(), seed=cfg.seed, command=args.command_line)
    manifest.config['backend'] = args.backend
    manifest.config['filter'] = not args.no_filter
    manifest.pool_hashes = {args.pool: pool_digest(pool)}

    if args.backend == 'greedy':
        result, run_log = _run_greedy(val_pool, cfg, args)
    else:
        result = search(val_pool, cfg)
        run_log = result.run_log(cfg)

    front = result.front if args.no_filter else filter_front(result.front)
    run_log['filtered_front_size'] = len(front)
    run_log['validation_hypervolume'] = hypervolume(front, cfg.hv_config)

    out = Path(args.out)
    run_log_path = out.with_name(out.name + '.runlog.json')
    atomic_write_json(run_log_path, run_log)
    manifest.write(run_log_path)
    write_front(out, front, cfg.grid)
    manifest.write(out)

    _print_banner(f"SEARCH RESULTS ({result.backend or cfg.backend}, {cfg.mode})")
    print(f"  Evaluations used:      {result.evaluations_used}/{cfg.budget if args.backend != 'greedy' else '-'}")
    print(f"  Archive front size:    {len(result.front)}")
    print(f"  Filtered front size:   {len(front)}")
    print(f"  Validation hypervolume: {run_log['validation_hypervolume']:.6f}")
    print(f"  Front written to:      {out}")
    print("=" * 70 + "\n")
    return EXIT_OK


# -----------------------------------------------------------------------------
# eval
# -----------------------------------------------------------------------------
def _read_genome(text: str, grid: ThresholdGrid) -> CascadeGenome:
    path = Path(text)
    raw = path.read_text(encoding='utf-8') if path.is_file() else text
    return genome_from_json(json.loads(raw), grid)


def _evaluate(genome: CascadeGenome, pool: ModelPool, grid: ThresholdGrid, confidence_mode: str,
              mode: str) -> Dict[str, Any]:
    genome.validate(pool.num_models, len(grid))
    cascade = decode(genome, grid)
    evaluator = CascadeEvaluator(pool, confidence_mode)
    if mode == 'ensemble':
        metrics = evaluator.evaluate_ensemble(cascade.models)
    else:
        metrics = evaluator.evaluate(cascade)
    return metrics.to_dict()


def cmd_eval(args: argparse.Namespace) -> int:
    grid = _parse_grid(args.grid)
    pool = load_pool(args.pool)
    val_pool, test_pool = _split(args, pool)
    pools = {'val': val_pool, 'test': test_pool, 'all': pool}
    splits = list(dict.fromkeys(args.split or ['val']))
    if 'test' in splits and test_pool is None:
        raise UsageError("--split test needs --split-fraction and --split-seed")

    genome = _read_genome(args.genome, grid)
    report = {split: _evaluate(genome, pools[split], grid, args.confidence_mode, args.mode) for split in splits}
    text = json.dumps(report, indent=2)
    print(text)
    if args.out:
        manifest = RunManifest.start(_args_echo(args), seed=args.split_seed, command=args.command_line)
        manifest.pool_hashes = {args.pool: pool_digest(pool)}
        atomic_write_text(args.out, text + '\n')
        manifest.write(args.out)
    return EXIT_OK


# -----------------------------------------------------------------------------
# analyze
# -----------------------------------------------------------------------------
def _reevaluate(front: Sequence[FrontEntry], pool: ModelPool, grid: ThresholdGrid,
                confidence_mode: str) -> List[FrontEntry]:
    """Same genomes and names, objectives measured on ``pool``.

    Ensemble genomes carry all thresholds at 1.0, so cascade evaluation reproduces them exactly.
    """
    evaluator = CascadeEvaluator(pool, confidence_mode)
    entries = []
    for entry in front:
        entry.genome.validate(pool.num_models, len(grid))
        metrics = evaluator.evaluate(decode(entry.genome, grid))
        entries.append(FrontEntry.from_metrics(entry.genome, metrics, entry.name))
    return entries


def _load_fronts(args: argparse.Namespace, grid: ThresholdGrid) -> Tuple[Dict[str, List[FrontEntry]], RunManifest]:
    manifest = RunManifest.start(_args_echo(args), seed=args.split_seed, command=args.command_line)
    fronts = {path: read_front(path, grid) for path in args.fronts}
    if not args.test:
        return fronts, manifest
    if not args.pool:
        raise UsageError("--test needs --pool with the original prediction pool")
    pool = load_pool(args.pool)
    manifest.pool_hashes = {args.pool: pool_digest(pool)}
    _, test_pool = _split(args, pool)
    if test_pool is None:
        raise UsageError("--test needs --split-fraction and --split-seed to select the test split")
    return {path: _reevaluate(front, test_pool, grid, args.confidence_mode) for path, front in fronts.items()}, manifest


def _single_front(fronts: Dict[str, List[FrontEntry]], command: str) -> List[FrontEntry]:
    if len(fronts) != 1:
        raise UsageError(f"analyze {command} takes exactly one front file")
    return next(iter(fronts.values()))


def cmd_analyze(args: argparse.Namespace) -> int:
    grid = _parse_grid(args.grid)
    fronts, manifest = _load_fronts(args, grid)
    action = args.analyze_command

    if action == 'hv':
        defaults = Config()
        hv_cfg = HypervolumeConfig(
            ref_mflops=args.ref_mflops if args.ref_mflops is not None else defaults.HV_REF_MFLOPS,
            ref_accuracy=args.ref_accuracy if args.ref_accuracy is not None else defaults.HV_REF_ACCURACY,
        )
        paths = list(fronts)
        values = [hypervolume(fronts[path], hv_cfg) for path in paths]
        best = [max_accuracy_point(fronts[path]) or ObjectivePoint(math.nan, math.nan) for path in paths]
        median = median_run(values)
        if len(paths) == 1:
            print(f"{values[0]:.10g}")
        else:
            print("front\thypervolume\tmax_accuracy_pct\tmflops_at_max")
            for index, path in enumerate(paths):
                row = f"{path}\t{values[index]:.10g}\t{best[index].accuracy_pct:.10g}\t{best[index].mflops:.10g}"
                print(row + ("\t(median)" if index == median else ""))
            array = np.array(values)
            print(f"mean\t{array.mean():.10g}")
            print(f"std\t{array.std():.10g}")
            print(f"median\t{paths[median]}")
        if args.out:
            buffer = io.StringIO()
            writer = csv.writer(buffer, lineterminator='\n')
            writer.writerow(['front', 'hypervolume', 'max_accuracy_pct', 'mflops_at_max', 'median'])
            for index, path in enumerate(paths):
                writer.writerow([path, repr(values[index]), repr(best[index].accuracy_pct),
                                 repr(best[index].mflops), int(index == median)])
            atomic_write_text(args.out, buffer.getvalue())
            manifest.write(args.out)
        return EXIT_OK

    front = _single_front(fronts, action)
    if action == 'filter':
        kept = filter_front(nondominated_front(front))
        print(f"Kept {len(kept)} of {len(front)} entries")
        if args.out:
            write_front(args.out, kept, grid)
            manifest.write(args.out)
    elif action == 'representative':
        named = representative_subset(front)
        print(f"{'Name':<16}{'MFLOPs':>12}{'Accuracy (%)':>16}")
        print("-" * 44)
        for name, entry in named:
            print(f"{name:<16}{entry.point.mflops:>12.1f}{entry.point.accuracy_pct:>16.2f}")
        if args.out:
            write_front(args.out, [entry for _, entry in named], grid)
            manifest.write(args.out)
    elif action == 'export-csv':
        if args.out:
            write_front_csv(args.out, front)
            manifest.write(args.out)
        else:
            sys.stdout.write(front_to_csv(front))
    else:
        raise UsageError(f"Unknown analyze command '{action}'")
    return EXIT_OK


# -----------------------------------------------------------------------------
# Parser
# -----------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Pareto-optimal cascade search over precomputed prediction pools')
    parser.add_argument('--log-level', default=None, help='Logging level (default: ENCAS_LOG_LEVEL or INFO)')
    commands = parser.add_subparsers(dest='command', required=True)

    # pool
    pool_parser = commands.add_parser('pool', help='Validate, synthesize, merge, split or convert pools')
    pool_parser.set_defaults(handler=cmd_pool)
    pool_commands = pool_parser.add_subparsers(dest='pool_command', required=True)
    validate = pool_commands.add_parser('validate', help='Check a pool manifest and its files')
    validate.add_argument('manifest')
    synth = pool_commands.add_parser('synth', help='Generate a synthetic pool from a SynthPoolSpec JSON')
    synth.add_argument('spec')
    synth.add_argument('out')
    synth.add_argument('--seed', type=int, default=None, help='Overrides the seed in the spec file')
    merge = pool_commands.add_parser('merge', help='Union of pools over the same samples')
    merge.add_argument('manifests', nargs='+')
    merge.add_argument('out')
    split = pool_commands.add_parser('split', help='Seeded sample-wise split into val/ and test/')
    split.add_argument('manifest')
    split.add_argument('out')
    split.add_argument('--fraction', type=float, required=True)
    split.add_argument('--seed', type=int, required=True)
    convert = pool_commands.add_parser('convert', help='Rewrite a pool (e.g. CSV-backed) in the binary format')
    convert.add_argument('manifest')
    convert.add_argument('out')

    # search
    search_parser = commands.add_parser('search', help='Search for a trade-off front of cascades')
    search_parser.set_defaults(handler=cmd_search)
    search_parser.add_argument('pool')
    search_parser.add_argument('-o', '--out', required=True, help='Front file to write')
    search_parser.add_argument('--seed', type=int, required=True)
    search_parser.add_argument('--backend', choices=BACKENDS + ('greedy',), default='mogomea')
    search_parser.add_argument('--mode', choices=GENOME_MODES, default=None)
    search_parser.add_argument('--budget', type=int, default=None)
    search_parser.add_argument('--k', type=int, default=None, help='Maximum cascade size')
    search_parser.add_argument('--grid', default=None, help='Comma-separated thresholds (default: 0, 0.02, ..., 1)')
    search_parser.add_argument('--confidence-mode', choices=CONFIDENCE_MODES, default=None)
    search_parser.add_argument('--population-size', type=int, default=None)
    search_parser.add_argument('--cluster-count', type=int, default=None)
    search_parser.add_argument('--no-seed-singletons', action='store_true')
    search_parser.add_argument('--archive-capacity', type=int, default=None)
    search_parser.add_argument('--exhaustive-limit', type=int, default=None)
    search_parser.add_argument('--workers', type=int, default=None)
    search_parser.add_argument('--config', default=None, help='JSON file mirroring SearchConfig')
    search_parser.add_argument('--no-filter', action='store_true', help='Skip the rounded-accuracy front filter')
    search_parser.add_argument('--anchors', choices=ANCHOR_MODES, default='all-models', help='Greedy backend only')
    search_parser.add_argument('--top-fraction', type=float, default=0.25, help='Greedy backend only')
    search_parser.add_argument('--ref-mflops', type=float, default=None)
    search_parser.add_argument('--ref-accuracy', type=float, default=None)
    _add_split_arguments(search_parser)

    # eval
    eval_parser = commands.add_parser('eval', help='Metrics of one genome')
    eval_parser.set_defaults(handler=cmd_eval)
    eval_parser.add_argument('pool')
    eval_parser.add_argument('genome', help='Genome JSON, inline or as a file path')
    eval_parser.add_argument('--split', action='append', choices=('val', 'test', 'all'), default=None)
    eval_parser.add_argument('--grid', default=None)
    eval_parser.add_argument('--confidence-mode', choices=CONFIDENCE_MODES, default='max-prob')
    eval_parser.add_argument('--mode', choices=GENOME_MODES, default='cascade')
    eval_parser.add_argument('-o', '--out', default=None)
    _add_split_arguments(eval_parser)

    # analyze
    analyze_parser = commands.add_parser('analyze', help='Hypervolume, filtering and export of front files')
    analyze_parser.set_defaults(handler=cmd_analyze)
    analyze_commands = analyze_parser.add_subparsers(dest='analyze_command', required=True)
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument('fronts', nargs='+')
    shared.add_argument('-o', '--out', default=None)
    shared.add_argument('--grid', default=None)
    shared.add_argument('--test', action='store_true', help='Re-evaluate the genomes on the test split')
    shared.add_argument('--pool', default=None)
    shared.add_argument('--confidence-mode', choices=CONFIDENCE_MODES, default='max-prob')
    _add_split_arguments(shared)
    hv = analyze_commands.add_parser('hv', parents=[shared], help='Normalized hypervolume per front')
    hv.add_argument('--ref-mflops', type=float, default=None)
    hv.add_argument('--ref-accuracy', type=float, default=None)
    analyze_commands.add_parser('filter', parents=[shared], help='Apply the rounded-accuracy filter')
    analyze_commands.add_parser('representative', parents=[shared], help='One named model per 100 MFLOPs')
    analyze_commands.add_parser('export-csv', parents=[shared], help='Plot-ready CSV')
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one command and return its exit code."""
    Config.load_env()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    args.command_line = list(argv) if argv is not None else list(sys.argv)

    level = (args.log_level or Config().LOG_LEVEL).upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO))

    try:
        return args.handler(args)
    except UsageError as e:
        logger.error(f"Usage error: {e}")
        return EXIT_USAGE
    except (ValueError, OSError, KeyError) as e:
        logger.error(f"Failed: {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
