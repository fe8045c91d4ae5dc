"""Greedy spectral subset selection and network surgery.

A layer's nodes are scored by how much of the layer's second-moment trace a
candidate subset J explains:

    r(J) = tr(S[F,J] (S[J,J] + ridge I)^-1 S[J,F]) / tr(S),

with S the empirical uncentered second moment of the post-activation values.
The greedy loop adds the candidate maximizing r, optionally biased by a
cross-domain moment-matching regularizer, until a required retention ratio
alpha is reached. Pruning keeps the selected nodes and folds the least-squares
recovery matrix into the next layer's weights.

Two greedy evaluation paths are provided: a naive reference that recomputes
the full trace ratio per candidate, and the default incremental path that
maintains rank-one residual downdates (see backend / _greedy_pure). They agree
to rounding and are cross-checked in the tests.
"""

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import backend
from . import net as nm
from . import stats as st
from .errors import DegenerateSigma, ShapeMismatch, StatsMissing, TopologyError
from .linalg import cholesky, default_ridge

PLATEAU_TOL = 1e-12
REG_MODES = ("none", "subset", "node")


@dataclass(frozen=True)
class GreedyConfig:
    """Selection parameters.

    alpha: required information retention ratio in (0, 1].
    lam: regularization weight (0 disables the moment-matching bias).
    reg_mode: 'none', 'subset' (whole-J penalty, recomputed per candidate per
        step) or 'node' (per-node penalty, computed once).
    max_cardinality: optional hard cap on |J|.
    ridge: diagonal regularization for the subset solves; None picks
        1e-8 * tr(sigma)/m.
    centered: use centered covariances in the regularizer (False: raw second
        moments).
    Ties in the selection score always break to the lowest index.
    """

    alpha: float = 1.0
    lam: float = 1.0
    reg_mode: str = "none"
    max_cardinality: int = 0  # 0 means unbounded
    ridge: float = -1.0  # negative means automatic
    centered: bool = True

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.reg_mode not in REG_MODES:
            raise ValueError(f"reg_mode must be one of {REG_MODES}")


@dataclass(frozen=True)
class PruningPlan:
    """Result of one layer's selection.

    selected: indices in selection order.
    recovery: (m x |J|) least-squares reconstruction matrix; columns follow
        sorted(selected), and rows at the selected indices are the exact
        identity.
    ratio_trace: retention ratio after each selection (non-decreasing).
    """

    layer: int
    selected: tuple
    recovery: np.ndarray
    ratio_trace: tuple
    achieved_ratio: float
    plateau_flag: bool


def _check_sigma(sigma):
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ShapeMismatch(f"sigma must be square, got {sigma.shape}")
    if float(np.trace(sigma)) <= 0.0:
        raise DegenerateSigma(f"trace is {float(np.trace(sigma))}")
    return sigma


def _resolve_ridge(sigma, ridge):
    return default_ridge(sigma) if ridge is None or ridge < 0 else float(ridge)


def retention_ratio(sigma, j, ridge=None):
    """Fraction of tr(sigma) explainable from the subset j."""
    sigma = _check_sigma(sigma)
    j = list(j)
    if not j:
        return 0.0
    ridge = _resolve_ridge(sigma, ridge)
    factor = cholesky(sigma[np.ix_(j, j)], ridge=ridge)
    x = scipy.linalg.solve_triangular(factor.lower, sigma[j, :], lower=True)
    return float(np.sum(x * x)) / float(np.trace(sigma))


def recovery_matrix(sigma, j, ridge=None):
    """Least-squares reconstruction of all m variables from the subset j.

    Columns follow the order of j. Rows at the selected indices are set to
    the exact identity (the ridge-free optimum), so keeping every node yields
    a bit-exact identity map.
    """
    sigma = _check_sigma(sigma)
    j = list(j)
    if len(set(j)) != len(j):
        raise ValueError("subset indices must be unique")
    if not j:
        raise ValueError("subset must be nonempty")
    ridge = _resolve_ridge(sigma, ridge)
    factor = cholesky(sigma[np.ix_(j, j)], ridge=ridge)
    a = scipy.linalg.cho_solve((factor.lower, True), sigma[j, :]).T
    a[np.asarray(j, dtype=np.intp), :] = np.eye(len(j))
    return a


def reg_subset(stats_source, stats_target, scaling, j, centered=True):
    """Moment-matching discrepancy restricted to the subset j: mean-difference
    norm plus scaled covariance-difference Frobenius norm."""
    j = np.asarray(sorted(j), dtype=np.intp)
    if j.size == 0:
        raise ValueError("subset must be nonempty")
    d = stats_source.mean - stats_target.mean
    m = scaling * (st.domain_cov(stats_source, centered)
                   - st.domain_cov(stats_target, centered))
    if d.shape[0] != m.shape[0] or scaling.shape != m.shape:
        raise ShapeMismatch("statistics widths disagree")
    return float(np.linalg.norm(d[j]) + np.linalg.norm(m[np.ix_(j, j)]))


def reg_node(stats_source, stats_target, scaling, centered=True):
    """Per-node moment-matching discrepancy: |mean difference| plus the norm
    of the node's full scaled covariance-difference row. Computed once for
    all nodes."""
    d = stats_source.mean - stats_target.mean
    m = scaling * (st.domain_cov(stats_source, centered)
                   - st.domain_cov(stats_target, centered))
    return np.abs(d) + np.sqrt((m * m).sum(axis=1))


class _SubsetReg:
    """Incremental evaluation of reg_subset over J u {j} for all candidates.

    Maintains sum_{i in J} d_i^2, ||M[J,J]||_F^2, and the per-candidate column
    sums sum_{i in J} M[i,j]^2, so each step is O(m). Values match the direct
    formula exactly (same sums of squares).
    """

    def __init__(self, stats_source, stats_target, scaling, centered):
        self.d = stats_source.mean - stats_target.mean
        self.m = scaling * (st.domain_cov(stats_source, centered)
                            - st.domain_cov(stats_target, centered))
        self.mean_sq = 0.0
        self.fro_sq = 0.0
        self.col_sq = np.zeros(self.d.shape[0])

    def candidate_values(self, cand):
        term1 = np.sqrt(self.mean_sq + self.d[cand] ** 2)
        diag = np.diagonal(self.m)[cand]
        term2 = np.sqrt(self.fro_sq + 2.0 * self.col_sq[cand] + diag * diag)
        return term1 + term2

    def absorb(self, i):
        self.mean_sq += float(self.d[i] ** 2)
        self.fro_sq += 2.0 * float(self.col_sq[i]) + float(self.m[i, i] ** 2)
        self.col_sq += self.m[i] ** 2


def _naive_gains(sigma, selected, cand, ridge):
    """Reference candidate evaluation: full trace ratio per candidate."""
    gains = np.empty(len(cand))
    base = 0.0
    if selected:
        base = _trace_num(sigma, selected, ridge)
    for k, j in enumerate(cand):
        gains[k] = _trace_num(sigma, selected + [j], ridge) - base
    return gains


def _trace_num(sigma, j, ridge):
    factor = cholesky(sigma[np.ix_(j, j)], ridge=ridge)
    x = scipy.linalg.solve_triangular(factor.lower, sigma[j, :], lower=True)
    return float(np.sum(x * x))


def find_subset(sigma, cfg=GreedyConfig(), stats_source=None, stats_target=None,
                layer=0, strategy="incremental"):
    """Greedy construction of the kept-node subset for one layer.

    Stops when the retention ratio reaches cfg.alpha, candidates run out,
    max_cardinality is hit, or the best candidate's improvement falls below
    numerical resolution (plateau guard; flagged on the plan).
    """
    sigma = _check_sigma(sigma)
    if strategy not in ("incremental", "naive"):
        raise ValueError(f"unknown strategy {strategy!r}")
    m = sigma.shape[0]
    total = float(np.trace(sigma))
    ridge = _resolve_ridge(sigma, cfg.ridge)

    reg_vec = None
    subset_reg = None
    if cfg.reg_mode != "none":
        if stats_source is None or stats_target is None:
            raise StatsMissing(f"reg_mode={cfg.reg_mode} needs source and target stats")
        scaling = st.scaling_matrix(stats_target, centered=cfg.centered)
        if cfg.reg_mode == "node":
            reg_vec = reg_node(stats_source, stats_target, scaling, cfg.centered)
        else:
            subset_reg = _SubsetReg(stats_source, stats_target, scaling, cfg.centered)

    if strategy == "incremental":
        residual, rownorm2 = backend.residual_init(sigma)
    active = np.ones(m, dtype=bool)
    selected = []
    trace = []
    num = 0.0
    ratio = 0.0
    plateau = False
    max_card = cfg.max_cardinality if cfg.max_cardinality > 0 else m

    while ratio < cfg.alpha and len(selected) < max_card and active.any():
        cand = np.flatnonzero(active)
        if strategy == "incremental":
            eff = np.diagonal(residual)[cand] + ridge
            gains = np.where(eff > 0, rownorm2[cand] / np.maximum(eff, 1e-300), 0.0)
        else:
            gains = _naive_gains(sigma, selected, list(cand), ridge)
        if float(gains.max()) / total < PLATEAU_TOL:
            plateau = True
            break
        values = (num + gains) / total

        scores = values
        if cfg.reg_mode != "none" and cfg.lam > 0.0:
            rvals = reg_vec[cand] if reg_vec is not None \
                else subset_reg.candidate_values(cand)
            rmax = float(rvals.max())
            if rmax > 0.0:
                scores = values - cfg.lam * float(np.std(values)) * (rvals / rmax)

        pick = int(cand[int(np.argmax(scores))])
        if strategy == "incremental":
            num += backend.residual_update(residual, rownorm2, pick, ridge)
        else:
            num = _trace_num(sigma, selected + [pick], ridge)
        ratio = num / total
        selected.append(pick)
        trace.append(ratio)
        active[pick] = False
        if subset_reg is not None:
            subset_reg.absorb(pick)

    recovery = recovery_matrix(sigma, sorted(selected), ridge) if selected \
        else np.zeros((m, 0))
    return PruningPlan(layer=layer, selected=tuple(selected), recovery=recovery,
                       ratio_trace=tuple(trace),
                       achieved_ratio=trace[-1] if trace else 0.0,
                       plateau_flag=plateau)


# ---------------------------------------------------------------------------
# network surgery
# ---------------------------------------------------------------------------

def _locate_block(network, cp):
    """(own_index, batchnorm_index_or_None, next_index) around a capture point.

    Dropout markers, Flatten, and MaxPool2 between the capture and the next
    weighted layer are passed through. Folding across MaxPool2 treats channel
    mixing as commuting with per-channel pooling, which is exact for pure
    channel selection and approximate for reconstruction.
    """
    if cp >= len(network.layers) or not isinstance(network.layers[cp], nm.ReLU):
        raise TopologyError(f"capture point {cp} is not an activation")
    i = cp - 1
    bn_idx = None
    if i >= 0 and isinstance(network.layers[i], nm.BatchNorm):
        bn_idx = i
        i -= 1
    if i < 0 or not isinstance(network.layers[i], (nm.Dense, nm.Conv2D)):
        raise TopologyError(f"capture point {cp} has no feeding Dense/Conv layer")
    own_idx = i
    j = cp + 1
    while j < len(network.layers):
        layer = network.layers[j]
        if isinstance(layer, (nm.Dense, nm.Conv2D)):
            return own_idx, bn_idx, j
        if isinstance(layer, (nm.Dropout, nm.Flatten, nm.MaxPool2)):
            j += 1
            continue
        raise TopologyError(f"capture point {cp} feeds a {layer.kind} layer")
    raise TopologyError(f"capture point {cp} feeds no downstream layer")


def _sorted_plan(plan):
    j = np.sort(np.asarray(plan.selected, dtype=np.intp))
    return j, plan.recovery  # recovery columns follow sorted(selected)


def _slice_own(layer, bn, j):
    new_layer = dataclasses.replace(
        layer, weight=layer.weight[j].copy(),
        bias=None if layer.bias is None else layer.bias[j].copy())
    new_bn = None
    if bn is not None:
        new_bn = nm.BatchNorm(bn.scale[j].copy(), bn.shift[j].copy(),
                              bn.running_mean[j].copy(), bn.running_var[j].copy(),
                              eps=bn.eps, momentum=bn.momentum)
    return new_layer, new_bn


def apply_plan_dense(network, cp, plan):
    """Prune the layer captured at cp when it feeds a Dense layer.

    Keeps rows/bias/BatchNorm channels in J and folds the recovery matrix
    into the next Dense weight. A conv capture feeding a Dense through
    Flatten folds per spatial position (channels-major flattening).
    """
    own_idx, bn_idx, next_idx = _locate_block(network, cp)
    next_layer = network.layers[next_idx]
    if not isinstance(next_layer, nm.Dense):
        raise TopologyError(f"capture point {cp} feeds {next_layer.kind}, not dense")
    own = network.layers[own_idx]
    j, a = _sorted_plan(plan)
    m = own.weight.shape[0]
    if m != a.shape[0]:
        raise ShapeMismatch(f"plan covers width {a.shape[0]}, layer has {m}")
    new_own, new_bn = _slice_own(own, network.layers[bn_idx] if bn_idx is not None else None, j)

    w = next_layer.weight
    if isinstance(own, nm.Dense):
        if w.shape[1] != m:
            raise TopologyError("next dense layer width disagrees with capture width")
        new_w = w @ a
    else:
        # conv capture flattened to (channels, spatial) blocks
        if w.shape[1] % m:
            raise TopologyError("flattened width is not a multiple of the channel count")
        spatial = w.shape[1] // m
        new_w = np.einsum("pcs,cj->pjs", w.reshape(w.shape[0], m, spatial), a,
                          optimize=True).reshape(w.shape[0], len(j) * spatial)
    layers = list(network.layers)
    layers[own_idx] = new_own
    if bn_idx is not None:
        layers[bn_idx] = new_bn
    layers[next_idx] = nm.Dense(new_w, next_layer.bias.copy())
    return nm.with_layers(network, layers)


def apply_plan_conv(network, cp, plan):
    """Prune the conv layer captured at cp when it feeds another Conv2D:
    keep output channels in J and right-multiply every filter-grid position
    of the next conv by the recovery matrix."""
    own_idx, bn_idx, next_idx = _locate_block(network, cp)
    next_layer = network.layers[next_idx]
    if not isinstance(next_layer, nm.Conv2D):
        raise TopologyError(f"capture point {cp} feeds {next_layer.kind}, not conv")
    own = network.layers[own_idx]
    if not isinstance(own, nm.Conv2D):
        raise TopologyError("dense capture cannot feed a conv layer")
    j, a = _sorted_plan(plan)
    m = own.weight.shape[0]
    if m != a.shape[0] or next_layer.weight.shape[1] != m:
        raise ShapeMismatch("plan width disagrees with the conv channel counts")
    new_own, new_bn = _slice_own(own, network.layers[bn_idx] if bn_idx is not None else None, j)
    new_t = np.einsum("oikl,ij->ojkl", next_layer.weight, a, optimize=True)
    layers = list(network.layers)
    layers[own_idx] = new_own
    if bn_idx is not None:
        layers[bn_idx] = new_bn
    layers[next_idx] = dataclasses.replace(next_layer, weight=new_t,
                                           bias=next_layer.bias.copy())
    return nm.with_layers(network, layers)


def apply_plan(network, cp, plan):
    """Dispatch to the dense or conv surgery based on the downstream layer."""
    _, _, next_idx = _locate_block(network, cp)
    if isinstance(network.layers[next_idx], nm.Dense):
        return apply_plan_dense(network, cp, plan)
    return apply_plan_conv(network, cp, plan)


# ---------------------------------------------------------------------------
# full-network compression
# ---------------------------------------------------------------------------

def compress_network(network, sigma_features, cfg, source_features=None,
                     target_features=None, keep_counts=None, alphas=None,
                     row_budget=st.DEFAULT_ROW_BUDGET, seed=0,
                     strategy="incremental", batch_size=256):
    """Prune every capture point, input to output.

    Selection statistics are always computed on the already-compressed prefix
    (the streams are pushed through each pruned block before the next layer
    is considered), so each layer sees the activations the deployed network
    will actually produce.

    sigma_features defines the selection second moment; source/target
    features feed the moment-matching statistics when cfg.reg_mode != 'none'.
    keep_counts / alphas optionally override cfg per capture point id.
    """
    streams = {"sigma": np.asarray(sigma_features, dtype=np.float64)}
    if cfg.reg_mode != "none":
        if source_features is None or target_features is None:
            raise StatsMissing("regularized compression needs both domain streams")
        streams["source"] = np.asarray(source_features, dtype=np.float64)
        streams["target"] = np.asarray(target_features, dtype=np.float64)
    rng = np.random.default_rng(seed)
    plans = {}
    frontier = 0
    for cp in sorted(network.capture_points):
        for name, x in streams.items():
            streams[name] = _push(network, x, frontier, cp + 1, batch_size)
        frontier = cp + 1
        accs = {name: _rows_to_acc(cp, x, row_budget, rng, batch_size)
                for name, x in streams.items()}
        sigma = st.finalize(accs["sigma"]).sigma
        stats_s = st.finalize(accs["source"], "source") if "source" in accs else None
        stats_t = st.finalize(accs["target"], "target") if "target" in accs else None
        local = cfg
        if alphas and cp in alphas:
            local = dataclasses.replace(local, alpha=alphas[cp])
        if keep_counts and cp in keep_counts:
            local = dataclasses.replace(local, alpha=1.0,
                                        max_cardinality=int(keep_counts[cp]))
        plan = find_subset(sigma, local, stats_source=stats_s, stats_target=stats_t,
                           layer=cp, strategy=strategy)
        network = apply_plan(network, cp, plan)
        plans[cp] = plan
        kept = np.asarray(sorted(plan.selected), dtype=np.intp)
        for name, x in streams.items():
            streams[name] = x[:, kept] if x.ndim == 2 else x[:, kept, :, :]
    return network, plans


def _push(network, x, start, stop, batch_size):
    """Apply layers [start, stop) in inference mode, batched."""
    if start >= stop:
        return x
    outs = []
    for s in range(0, len(x), batch_size):
        h = x[s:s + batch_size]
        for i in range(start, stop):
            h = nm.apply_layer(network.layers[i], h, index=i)
        outs.append(h)
    return np.concatenate(outs, axis=0)


def _rows_to_acc(cp, x, row_budget, rng, batch_size):
    width = x.shape[1]
    acc = st.MomentAccumulator(cp, width)
    for s in range(0, len(x), batch_size):
        rows = nm.capture_rows(x[s:s + batch_size])
        if row_budget and rows.shape[0] > row_budget:
            keep = rng.choice(rows.shape[0], size=row_budget, replace=False)
            rows = rows[keep]
        st.accumulate(acc, nm.ActivationBatch(cp, rows))
    return acc


# ---------------------------------------------------------------------------
# plan serialization: manifest + f64 blob for the recovery matrix
# ---------------------------------------------------------------------------

PLAN_VERSION = 1


def save_plan(plan, path, config=None):
    os.makedirs(path, exist_ok=True)
    manifest = {
        "kind": "pruning_plan",
        "version": PLAN_VERSION,
        "layer": plan.layer,
        "selected": list(int(i) for i in plan.selected),
        "achieved_ratio": plan.achieved_ratio,
        "plateau_flag": plan.plateau_flag,
        "ratio_trace": list(plan.ratio_trace),
        "recovery_shape": list(plan.recovery.shape),
        "config": dataclasses.asdict(config) if config is not None else None,
    }
    with open(os.path.join(path, "plan.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    with open(os.path.join(path, "plan.bin"), "wb") as fh:
        fh.write(np.ascontiguousarray(plan.recovery, dtype="<f8").tobytes())


def load_plan(path):
    """Returns (plan, config_echo_dict_or_None)."""
    from .errors import FormatError
    with open(os.path.join(path, "plan.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("kind") != "pruning_plan" or manifest.get("version") != PLAN_VERSION:
        raise FormatError("not a pruning plan directory")
    shape = tuple(manifest["recovery_shape"])
    with open(os.path.join(path, "plan.bin"), "rb") as fh:
        blob = fh.read()
    if len(blob) != 8 * int(np.prod(shape)):
        raise FormatError("recovery blob size disagrees with the manifest")
    recovery = np.frombuffer(blob, dtype="<f8").reshape(shape).copy()
    plan = PruningPlan(layer=int(manifest["layer"]),
                       selected=tuple(manifest["selected"]),
                       recovery=recovery,
                       ratio_trace=tuple(manifest["ratio_trace"]),
                       achieved_ratio=float(manifest["achieved_ratio"]),
                       plateau_flag=bool(manifest["plateau_flag"]))
    return plan, manifest.get("config")
