"""Config-driven experiment pipeline: data generation, training (with a disk
model cache), statistics, compression sweeps, optional fine-tuning,
evaluation, and CSV/JSON reporting.

Runs are deterministic per (config, seed). Evaluation is always on the target
test split (plus the source test split for reference).
"""

import csv
import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from . import lowrank as lr
from . import net as nm
from . import spectral as sp
from . import stats as st
from . import train as tr
from .config import SPECTRAL_METHODS
from .datasets import make_two_domain
from .errors import PipelineStageError, SpecPruneError

REG_MODE_BY_METHOD = {
    "spectral": "none",
    "spectral_reg_subset": "subset",
    "spectral_reg_node": "node",
}

CSV_COLUMNS = ("seed", "method", "sweep_value", "lambda", "data_choice",
               "params_before", "params_after", "flops_before", "flops_after",
               "compression_rate", "ratio_achieved", "acc_source", "acc_target",
               "seconds")


# ---------------------------------------------------------------------------
# model factory and training scenarios
# ---------------------------------------------------------------------------

def build_digits_model(model_cfg, seed):
    """Conv(x3) + dense(x2) + classifier stack on 8x8 glyphs, BatchNorm and
    ReLU after every hidden layer, dropout after the conv features."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    c1, c2, c3 = model_cfg.conv_channels
    d1, d2 = model_cfg.dense_widths

    def conv(oc, ic, stride):
        w = rng.normal(size=(oc, ic, 3, 3)) * np.sqrt(2.0 / (ic * 9))
        return nm.Conv2D(w, np.zeros(oc), stride=stride, padding=1)

    def dense(out, inp):
        return nm.Dense(rng.normal(size=(out, inp)) * np.sqrt(2.0 / inp), np.zeros(out))

    def bn(c):
        return nm.BatchNorm(np.ones(c), np.zeros(c), np.zeros(c), np.ones(c))

    layers = (
        conv(c1, 1, 1), bn(c1), nm.ReLU(),
        conv(c2, c1, 2), bn(c2), nm.ReLU(),
        conv(c3, c2, 2), bn(c3), nm.ReLU(),
        nm.Flatten(), nm.Dropout(model_cfg.dropout),
        dense(d1, c3 * 4), bn(d1), nm.ReLU(),
        dense(d2, d1), bn(d2), nm.ReLU(),
        dense(10, d2),
    )
    return nm.Network(layers, (1, 8, 8), capture_points=(2, 5, 8, 13, 16))


def _subset(ds, n):
    return ds if n <= 0 else ds.subset(n)


def train_model(cfg, seed, source, target):
    """Train per the configured scenario; deterministic in the seed."""
    netw = build_digits_model(cfg.model, seed)
    ts = cfg.train
    base = dict(optimizer=ts.optimizer, learning_rate=ts.learning_rate,
                weight_decay=ts.weight_decay, batch_size=ts.batch_size, seed=seed)
    if cfg.scenario == "digits_joint":
        data = [_subset(source.train, ts.source_samples),
                _subset(target.train, ts.target_samples)]
        return tr.train(netw, data, tr.TrainConfig(epochs=ts.epochs, **base))
    # pretrain on source, then fine-tune the dense stack on target with the
    # convolutional features frozen
    netw = tr.train(netw, [_subset(source.train, ts.source_samples)],
                    tr.TrainConfig(epochs=ts.pretrain_epochs, **base))
    flatten_idx = next(i for i, l in enumerate(netw.layers) if isinstance(l, nm.Flatten))
    freeze = frozenset(range(flatten_idx))
    return tr.train(netw, [_subset(target.train, ts.target_samples)],
                    tr.TrainConfig(epochs=ts.finetune_epochs, freeze=freeze, **base))


def _model_cache_key(cfg, seed):
    return st.content_key("model-v1", cfg.scenario, repr(cfg.data), repr(cfg.model),
                          repr(cfg.train), int(seed))


def get_or_train_model(cfg, seed, source, target):
    """Disk-cached trained model. The returned network is always the reloaded
    (float32-quantized) artifact so cache hits and misses are identical."""
    cache_dir = os.path.join(cfg.paths.out_dir, "models", _model_cache_key(cfg, seed)[:16])
    if not os.path.exists(os.path.join(cache_dir, "model.json")):
        trained = train_model(cfg, seed, source, target)
        nm.save_model(trained, cache_dir)
    return nm.load_model(cache_dir)


# ---------------------------------------------------------------------------
# statistics inputs per data-choice setting
# ---------------------------------------------------------------------------

def stats_features(cfg, source, target):
    """Selection-statistics samples under the configured data-choice mixture."""
    n = cfg.stats.target_samples
    m = cfg.stats.source_samples
    tgt = target.train.features[:n]
    if cfg.stats.data_choice == "target_only":
        return tgt
    if cfg.stats.data_choice == "target_source_mix":
        half = n // 2
        return np.concatenate([target.train.features[:half],
                               source.train.features[:half]])
    return np.concatenate([tgt, source.train.features[:m]])


def reg_features(cfg, source, target):
    """Equal-count per-domain samples for the moment-matching statistics."""
    n = cfg.stats.target_samples
    return source.train.features[:n], target.train.features[:n]


# ---------------------------------------------------------------------------
# compression dispatch
# ---------------------------------------------------------------------------

def compress_model(cfg, netw, sweep_value, sigma_feats, src_feats, tgt_feats, seed):
    """One sweep point: returns (compressed network, per-layer achieved ratios)."""
    method = cfg.compress.method
    if method in SPECTRAL_METHODS:
        reg_mode = REG_MODE_BY_METHOD[method]
        gcfg = sp.GreedyConfig(
            alpha=float(sweep_value) if cfg.compress.sweep_kind == "alpha" else 1.0,
            lam=cfg.compress.lam,
            reg_mode=reg_mode,
            ridge=cfg.compress.ridge,
            centered=cfg.stats.covariance == "centered",
        )
        conv_value = cfg.compress.conv_value
        conv_captures = {cp for cp in netw.capture_points
                         if isinstance(nm._feeding_layer(netw, cp)[1], nm.Conv2D)}

        def value_for(cp):
            return conv_value if (conv_value > 0 and cp in conv_captures) \
                else float(sweep_value)

        keep_counts = alphas = None
        if cfg.compress.sweep_kind == "keep_fraction":
            widths = nm.layer_widths(netw)
            keep_counts = {cp: max(1, round(value_for(cp) * w))
                           for cp, w in widths.items()}
        elif conv_value > 0:
            alphas = {cp: value_for(cp) for cp in netw.capture_points}
        compressed, plans = sp.compress_network(
            netw, sigma_feats, gcfg,
            source_features=src_feats if reg_mode != "none" else None,
            target_features=tgt_feats if reg_mode != "none" else None,
            keep_counts=keep_counts, alphas=alphas,
            row_budget=cfg.stats.row_budget, seed=seed)
        ratios = tuple(plans[cp].achieved_ratio for cp in sorted(plans))
        return compressed, ratios
    return _lowrank_compress(netw, method, int(sweep_value), sigma_feats,
                             cfg.compress.classifier_rank_rate), ()


def _lowrank_compress(netw, method, k, sigma_feats, classifier_rate):
    """Factor the hidden dense layers at rank k (classifier at a fixed rate),
    input to output, recomputing layer inputs on the compressed prefix."""
    dense_idx = [i for i, l in enumerate(netw.layers) if isinstance(l, nm.Dense)]
    hidden, out_idx = dense_idx[:-1], dense_idx[-1]
    current = netw
    offset = 0
    for idx in hidden + [out_idx]:
        i = idx + offset
        layer = current.layers[i]
        m, n = layer.weight.shape
        if idx == out_idx:
            if classifier_rate <= 0:
                continue
            kk = max(1, math.floor(classifier_rate * m * n / (m + n)))
        else:
            kk = min(k, m, n)
        if not lr.dalr_feasible(kk, m, n):
            continue  # factorization would not shrink the layer
        if method == "dalr":
            x = sp._push(current, sigma_feats, 0, i, batch_size=256)
            fd = lr.dalr_compress(layer.weight, layer.bias, x.T, kk)
        else:
            fd = lr.svd_truncate(layer.weight, layer.bias, kk)
        current = lr.replace_dense(current, i, fd)
        offset += 1
    return current


def finetune_model(cfg, netw, target, seed):
    """Optional post-compression fine-tuning on the target train split.

    Dropout markers are disabled for node-pruned models (their input
    dimension changed); factorization baselines keep them."""
    ft = cfg.fine_tune
    if ft is None or ft.epochs == 0:
        return netw
    if cfg.compress.method in SPECTRAL_METHODS:
        layers = [dataclasses.replace(l, rate=0.0) if isinstance(l, nm.Dropout) else l
                  for l in netw.layers]
        netw = nm.with_layers(netw, layers)
    tc = tr.TrainConfig(optimizer=ft.optimizer, learning_rate=ft.learning_rate,
                        weight_decay=ft.weight_decay, batch_size=ft.batch_size,
                        epochs=ft.epochs, seed=seed)
    return tr.train(netw, [target.train], tc)


# ---------------------------------------------------------------------------
# report types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunRecord:
    seed: int
    method: str
    sweep_value: float
    lam: float
    data_choice: str
    params_before: int
    params_after: int
    flops_before: int
    flops_after: int
    compression_rate: float
    ratio_achieved: tuple  # per pruned layer; empty for factorization methods
    acc_source: float
    acc_target: float
    seconds: float


@dataclass(frozen=True)
class CompressionReport:
    rows: tuple

    def sorted(self):
        return CompressionReport(tuple(sorted(
            self.rows, key=lambda r: (r.seed, r.method, r.sweep_value))))


def _record_to_flat(r):
    mean_ratio = float(np.mean(r.ratio_achieved)) if r.ratio_achieved else ""
    return {"seed": r.seed, "method": r.method, "sweep_value": r.sweep_value,
            "lambda": r.lam, "data_choice": r.data_choice,
            "params_before": r.params_before, "params_after": r.params_after,
            "flops_before": r.flops_before, "flops_after": r.flops_after,
            "compression_rate": r.compression_rate, "ratio_achieved": mean_ratio,
            "acc_source": r.acc_source, "acc_target": r.acc_target,
            "seconds": r.seconds}


def emit_report(report, path, fmt="csv"):
    """Write the report. CSV flattens ratio_achieved to its mean; JSON keeps
    the per-layer tuple and round-trips to an identical in-memory report."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            for r in report.rows:
                writer.writerow(_record_to_flat(r))
    elif fmt == "json":
        rows = []
        for r in report.rows:
            d = dataclasses.asdict(r)
            d["lambda"] = d.pop("lam")
            d["ratio_achieved"] = list(r.ratio_achieved)
            rows.append(d)
        with open(path, "w") as fh:
            json.dump({"rows": rows}, fh, indent=1)
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def load_report(path):
    with open(path) as fh:
        doc = json.load(fh)
    rows = []
    for d in doc["rows"]:
        d = dict(d)
        d["lam"] = d.pop("lambda")
        d["ratio_achieved"] = tuple(d["ratio_achieved"])
        rows.append(RunRecord(**d))
    return CompressionReport(tuple(rows))


# ---------------------------------------------------------------------------
# pipeline stages
# ---------------------------------------------------------------------------

def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except SpecPruneError as exc:
        raise PipelineStageError(name, exc) from exc


def run(cfg, log=None):
    """Full sweep: train -> collect stats -> compress -> (fine-tune) -> evaluate,
    one record per (seed, sweep point). Deterministic per seed."""
    say = log or (lambda *_: None)
    records = []
    for seed in cfg.seeds:
        source, target = _stage("gen-data", make_two_domain, seed,
                                cfg.data.n_per_split, cfg.data.shift)
        model = _stage("train", get_or_train_model, cfg, seed, source, target)
        params_before = nm.count_params(model)
        flops_before = nm.count_flops(model)
        sigma_feats = stats_features(cfg, source, target)
        src_feats, tgt_feats = reg_features(cfg, source, target)
        for value in cfg.compress.sweep:
            t0 = time.perf_counter()
            compressed, ratios = _stage("compress", compress_model, cfg, model,
                                        value, sigma_feats, src_feats, tgt_feats, seed)
            seconds = time.perf_counter() - t0
            compressed = _stage("finetune", finetune_model, cfg, compressed,
                                target, seed)
            acc_source = _stage("eval", tr.evaluate, compressed, source.test)
            acc_target = _stage("eval", tr.evaluate, compressed, target.test)
            params_after = nm.count_params(compressed)
            records.append(RunRecord(
                seed=seed, method=cfg.compress.method, sweep_value=float(value),
                lam=cfg.compress.lam, data_choice=cfg.stats.data_choice,
                params_before=params_before, params_after=params_after,
                flops_before=flops_before, flops_after=nm.count_flops(compressed),
                compression_rate=1.0 - params_after / params_before,
                ratio_achieved=ratios, acc_source=acc_source,
                acc_target=acc_target, seconds=seconds))
            say(f"seed={seed} {cfg.compress.method}@{value}: "
                f"cr={records[-1].compression_rate:.3f} "
                f"acc_t={acc_target:.3f} ({seconds:.1f}s)")
    return CompressionReport(tuple(records)).sorted()


# ---------------------------------------------------------------------------
# node-specificity analysis
# ---------------------------------------------------------------------------

def node_specificity_analysis(cfg, log=None):
    """Prune a layer under source-only vs target-only statistics and compare
    the activation rates of the selection-specific node classes on both
    domains; repeated at the first and last capture points."""
    say = log or (lambda *_: None)
    rows = []
    for seed in cfg.seeds:
        source, target = _stage("gen-data", make_two_domain, seed,
                                cfg.data.n_per_split, cfg.data.shift)
        model = _stage("train", get_or_train_model, cfg, seed, source, target)
        widths = nm.layer_widths(model)
        n = cfg.stats.target_samples
        captures = {"first": min(model.capture_points),
                    "last": max(model.capture_points)}
        for pos, cp in captures.items():
            per_domain = {}
            for domain, splits in (("source", source), ("target", target)):
                acc = st.collect_moments(model, splits.train.features[:n],
                                         capture_ids=(cp,),
                                         row_budget=cfg.stats.row_budget,
                                         seed=seed)[cp]
                per_domain[domain] = st.finalize(acc, domain).sigma
            keep = max(1, round(cfg.analysis.keep_fraction * widths[cp]))
            gcfg = sp.GreedyConfig(alpha=1.0, max_cardinality=keep,
                                   ridge=cfg.compress.ridge)
            j_source = set(sp.find_subset(per_domain["source"], gcfg, layer=cp).selected)
            j_target = set(sp.find_subset(per_domain["target"], gcfg, layer=cp).selected)
            classes = {
                "source": sorted(j_source - j_target),
                "target": sorted(j_target - j_source),
                "none": sorted(set(range(widths[cp])) - (j_source | j_target)),
            }
            for name, nodes in classes.items():
                row = {"seed": seed, "layer_pos": pos, "capture": cp,
                       "specificity": name, "count": len(nodes),
                       "rate_on_source": None, "rate_on_target": None}
                if nodes:
                    row["rate_on_source"] = st.activation_rate(model, cp, nodes,
                                                               source.test)
                    row["rate_on_target"] = st.activation_rate(model, cp, nodes,
                                                               target.test)
                rows.append(row)
            say(f"seed={seed} {pos} layer: "
                + ", ".join(f"{k}:{len(v)}" for k, v in classes.items()))
    return rows


def emit_analysis(rows, path, fmt="csv"):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    if fmt == "json":
        with open(path, "w") as fh:
            json.dump({"rows": rows}, fh, indent=1)
        return
    cols = ("seed", "layer_pos", "capture", "specificity", "count",
            "rate_on_source", "rate_on_target")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row[k] is None else row[k]) for k in cols})
