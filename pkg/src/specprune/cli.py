"""Command-line interface.

Every subcommand takes --config plus targeted overrides and exits 0 on
success, nonzero with a stage-tagged diagnostic on failure.
"""

import argparse
import dataclasses
import os
import sys

from . import net as nm
from . import pipeline as pl
from . import spectral as sp
from . import stats as st
from . import train as tr
from .config import load_config
from .datasets import make_two_domain, save_dataset
from .errors import SpecPruneError


def _apply_overrides(cfg, args):
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seeds=(args.seed,))
    if getattr(args, "method", None) is not None:
        compress = dataclasses.replace(cfg.compress, method=args.method)
        cfg = dataclasses.replace(cfg, compress=compress)
    if getattr(args, "alpha", None) is not None:
        compress = dataclasses.replace(cfg.compress, sweep=(args.alpha,),
                                       sweep_kind="alpha")
        cfg = dataclasses.replace(cfg, compress=compress)
    if getattr(args, "out", None) is not None:
        paths = dataclasses.replace(cfg.paths, out_dir=args.out)
        cfg = dataclasses.replace(cfg, paths=paths)
    return cfg


def _load_run_inputs(cfg, seed):
    source, target = make_two_domain(seed, cfg.data.n_per_split, cfg.data.shift)
    model = pl.get_or_train_model(cfg, seed, source, target)
    return source, target, model


def cmd_gen_data(cfg, args):
    for seed in cfg.seeds:
        source, target = make_two_domain(seed, cfg.data.n_per_split, cfg.data.shift)
        base = os.path.join(cfg.paths.out_dir, "data", f"seed{seed}")
        for splits in (source, target):
            for ds in (splits.train, splits.test):
                save_dataset(ds, os.path.join(base, f"{ds.domain}_{ds.split}"))
        print(f"seed {seed}: wrote 4 datasets under {base}")
    return 0


def cmd_train(cfg, args):
    for seed in cfg.seeds:
        source, target, model = _load_run_inputs(cfg, seed)
        acc_s = tr.evaluate(model, source.test)
        acc_t = tr.evaluate(model, target.test)
        print(f"seed {seed}: params={nm.count_params(model)} "
              f"acc_source={acc_s:.4f} acc_target={acc_t:.4f}")
    return 0


def cmd_stats(cfg, args):
    cache_dir = cfg.paths.cache_dir or os.path.join(cfg.paths.out_dir, "stats-cache")
    cache = st.StatsCache(cache_dir)
    for seed in cfg.seeds:
        source, target, model = _load_run_inputs(cfg, seed)
        feats = pl.stats_features(cfg, source, target)
        fingerprint = st.content_key(st.model_fingerprint(model),
                                     cfg.stats.data_choice, seed)
        for cp in model.capture_points:
            key = st.content_key(fingerprint, cp)
            acc = cache.get_or_compute(key, lambda cp=cp: st.collect_moments(
                model, feats, capture_ids=(cp,),
                row_budget=cfg.stats.row_budget, seed=seed)[cp])
            print(f"seed {seed} capture {cp}: n={acc.n} width={acc.width} "
                  f"cached as {key[:12]}")
    return 0


def cmd_compress(cfg, args):
    for seed in cfg.seeds:
        source, target, model = _load_run_inputs(cfg, seed)
        sigma_feats = pl.stats_features(cfg, source, target)
        src_feats, tgt_feats = pl.reg_features(cfg, source, target)
        value = cfg.compress.sweep[0]
        compressed, ratios = pl.compress_model(cfg, model, value, sigma_feats,
                                               src_feats, tgt_feats, seed)
        out = os.path.join(cfg.paths.out_dir, "compressed",
                           f"seed{seed}_{cfg.compress.method}_{value}")
        nm.save_model(compressed, out)
        before, after = nm.count_params(model), nm.count_params(compressed)
        print(f"seed {seed}: {before} -> {after} params "
              f"(rate {1 - after / before:.4f}); saved to {out}")
    return 0


def cmd_finetune(cfg, args):
    for seed in cfg.seeds:
        source, target = make_two_domain(seed, cfg.data.n_per_split, cfg.data.shift)
        model = nm.load_model(args.model)
        tuned = pl.finetune_model(cfg, model, target, seed)
        out = args.model.rstrip("/") + "_ft"
        nm.save_model(tuned, out)
        print(f"seed {seed}: fine-tuned model saved to {out} "
              f"acc_target={tr.evaluate(tuned, target.test):.4f}")
    return 0


def cmd_eval(cfg, args):
    model = nm.load_model(args.model)
    for seed in cfg.seeds:
        source, target = make_two_domain(seed, cfg.data.n_per_split, cfg.data.shift)
        print(f"seed {seed}: acc_source={tr.evaluate(model, source.test):.4f} "
              f"acc_target={tr.evaluate(model, target.test):.4f}")
    return 0


def cmd_run(cfg, args):
    report = pl.run(cfg, log=print)
    base = os.path.join(cfg.paths.out_dir, "report")
    pl.emit_report(report, base + ".csv", "csv")
    pl.emit_report(report, base + ".json", "json")
    print(f"{len(report.rows)} rows -> {base}.csv / {base}.json")
    return 0


def cmd_analyze_nodes(cfg, args):
    rows = pl.node_specificity_analysis(cfg, log=print)
    base = os.path.join(cfg.paths.out_dir, "node_specificity")
    pl.emit_analysis(rows, base + ".csv", "csv")
    pl.emit_analysis(rows, base + ".json", "json")
    print(f"{len(rows)} rows -> {base}.csv / {base}.json")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="specprune",
        description="Structured pruning by greedy spectral subset selection, "
                    "with low-rank baselines and a seeded experiment pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, needs_model=False):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, help="restrict to one seed")
        p.add_argument("--method", help="override compress.method")
        p.add_argument("--alpha", type=float, help="override the sweep with one alpha")
        p.add_argument("--out", help="override paths.out_dir")
        if needs_model:
            p.add_argument("--model", required=True, help="model directory")
        p.set_defaults(fn=fn)
        return p

    add("gen-data", cmd_gen_data)
    add("train", cmd_train)
    add("stats", cmd_stats)
    add("compress", cmd_compress)
    add("finetune", cmd_finetune, needs_model=True)
    add("eval", cmd_eval, needs_model=True)
    add("run", cmd_run)
    add("analyze-nodes", cmd_analyze_nodes)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        return args.fn(cfg, args)
    except SpecPruneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
