"""Per-layer, per-domain activation statistics.

Accumulates the uncentered second moment, mean, and centered covariance of
post-activation values at capture points, in float64. Accumulators are
single-writer and mergeable: shards of a sample stream can be accumulated
independently and merged exactly. Finalized statistics are immutable.
"""

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from . import net as nm
from .errors import InsufficientSamples, ShapeMismatch

DEFAULT_ROW_BUDGET = 4096
SCALING_FLOOR = 1e-12


class MomentAccumulator:
    """Running sums for one capture point: n, sum, and sum of outer products."""

    def __init__(self, layer, width):
        self.layer = int(layer)
        self.width = int(width)
        self.n = 0
        self.sum = np.zeros(width)
        self.sum_outer = np.zeros((width, width))

    def copy(self):
        out = MomentAccumulator(self.layer, self.width)
        out.n = self.n
        out.sum = self.sum.copy()
        out.sum_outer = self.sum_outer.copy()
        return out


def accumulate(acc, batch):
    """Fold an ActivationBatch into the accumulator (in place; returns acc)."""
    if batch.layer != acc.layer:
        raise ShapeMismatch(f"batch for layer {batch.layer}, accumulator for {acc.layer}")
    rows = np.asarray(batch.samples, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != acc.width:
        raise ShapeMismatch(f"expected (n, {acc.width}) rows, got {rows.shape}")
    if rows.shape[0] == 0:
        return acc
    acc.n += rows.shape[0]
    acc.sum += rows.sum(axis=0)
    acc.sum_outer += rows.T @ rows
    return acc


def merge(a, b):
    """Combine two accumulators over the same layer; exact sum of the streams."""
    if a.layer != b.layer or a.width != b.width:
        raise ShapeMismatch("accumulators cover different layers or widths")
    out = a.copy()
    out.n += b.n
    out.sum += b.sum
    out.sum_outer += b.sum_outer
    return out


@dataclass(frozen=True)
class LayerStatistics:
    """Finalized statistics: uncentered second moment, mean, centered covariance."""

    layer: int
    n: int
    sigma: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    domain: str = ""


def finalize(acc, domain=""):
    if acc.n < 2:
        raise InsufficientSamples(f"need at least 2 samples, have {acc.n}")
    sigma = acc.sum_outer / acc.n
    sigma = (sigma + sigma.T) / 2.0
    mean = acc.sum / acc.n
    cov = sigma - np.outer(mean, mean)
    cov = (cov + cov.T) / 2.0
    return LayerStatistics(layer=acc.layer, n=acc.n, sigma=sigma, mean=mean,
                           cov=cov, domain=domain)


def domain_cov(stats, centered=True):
    """The covariance carrier used by the moment-matching terms."""
    return stats.cov if centered else stats.sigma


def scaling_matrix(target_stats, floor=SCALING_FLOOR, centered=True):
    """Entrywise normalizer S_ij = (d_i * d_j)^(-1/4) from the target covariance
    diagonal, with the diagonal clamped below by `floor` before the power."""
    d = np.maximum(np.diag(domain_cov(target_stats, centered)), floor)
    return (d[:, None] * d[None, :]) ** -0.25


def collect_moments(network, features, capture_ids=None, row_budget=DEFAULT_ROW_BUDGET,
                    seed=0, batch_size=256):
    """Accumulate moments at the given capture points over a feature tensor.

    Conv captures contribute one row per spatial position; when a forward
    batch yields more than `row_budget` rows at a capture point, a uniform
    random subset of rows is kept (seeded, deterministic).
    """
    if capture_ids is None:
        capture_ids = network.capture_points
    widths = nm.layer_widths(network)
    accs = {cp: MomentAccumulator(cp, widths[cp]) for cp in capture_ids}
    rng = np.random.default_rng(seed)
    for start in range(0, len(features), batch_size):
        _, caps = nm.forward(network, features[start:start + batch_size],
                             capture=capture_ids)
        for cap in caps:
            rows = cap.samples
            if row_budget and rows.shape[0] > row_budget:
                keep = rng.choice(rows.shape[0], size=row_budget, replace=False)
                rows = rows[keep]
            accumulate(accs[cap.layer], nm.ActivationBatch(cap.layer, rows))
    return accs


def activation_rate(network, layer, nodes, data, batch_size=512):
    """Mean fraction of capture rows with strictly positive activation,
    averaged over the given node set."""
    nodes = np.asarray(sorted(nodes), dtype=np.int64)
    width = nm.layer_widths(network)[layer]
    if len(nodes) and (nodes.min() < 0 or nodes.max() >= width):
        raise ValueError(f"node indices out of range for width {width}")
    if len(nodes) == 0:
        raise ValueError("empty node set")
    positive = np.zeros(len(nodes))
    total = 0
    for start in range(0, len(data), batch_size):
        _, caps = nm.forward(network, data.features[start:start + batch_size],
                             capture=(layer,))
        rows = caps[0].samples
        positive += (rows[:, nodes] > 0).sum(axis=0)
        total += rows.shape[0]
    return float((positive / total).mean())


# ---------------------------------------------------------------------------
# disk cache: content-hash-named manifest + f64 blobs for sum/sum_outer
# ---------------------------------------------------------------------------

CACHE_VERSION = 1


def content_key(*parts):
    """sha256 over heterogeneous parts (bytes, str, int, float, ndarray)."""
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, np.ndarray):
            h.update(np.ascontiguousarray(p).tobytes())
        elif isinstance(p, bytes):
            h.update(p)
        else:
            h.update(repr(p).encode())
        h.update(b"\x00")
    return h.hexdigest()


def model_fingerprint(network):
    parts = [json.dumps([nm._layer_manifest(l) for l in network.layers]).encode()]
    for layer in network.layers:
        for name in nm.tensor_fields(layer):
            parts.append(np.ascontiguousarray(getattr(layer, name), dtype="<f4").tobytes())
    return content_key(*parts)


def dataset_fingerprint(ds):
    return content_key(ds.domain, ds.split,
                       np.ascontiguousarray(ds.features, dtype="<f4"),
                       ds.labels)


class StatsCache:
    """Content-addressed on-disk cache of moment accumulators."""

    def __init__(self, directory):
        self.directory = str(directory)
        os.makedirs(self.directory, exist_ok=True)

    def _paths(self, key):
        base = os.path.join(self.directory, key)
        return base + ".json", base + ".bin"

    def save(self, key, acc):
        manifest_path, blob_path = self._paths(key)
        manifest = {"version": CACHE_VERSION, "layer": acc.layer,
                    "width": acc.width, "n": acc.n}
        with open(blob_path, "wb") as fh:
            fh.write(np.ascontiguousarray(acc.sum, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(acc.sum_outer, dtype="<f8").tobytes())
        with open(manifest_path, "w") as fh:
            json.dump(manifest, fh)

    def load(self, key):
        manifest_path, blob_path = self._paths(key)
        if not (os.path.exists(manifest_path) and os.path.exists(blob_path)):
            return None
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        if manifest.get("version") != CACHE_VERSION:
            return None
        width = int(manifest["width"])
        with open(blob_path, "rb") as fh:
            blob = fh.read()
        if len(blob) != 8 * (width + width * width):
            return None
        acc = MomentAccumulator(manifest["layer"], width)
        acc.n = int(manifest["n"])
        acc.sum = np.frombuffer(blob[:8 * width], dtype="<f8").copy()
        acc.sum_outer = np.frombuffer(blob[8 * width:], dtype="<f8") \
            .reshape(width, width).copy()
        return acc

    def get_or_compute(self, key, fn):
        acc = self.load(key)
        if acc is None:
            acc = fn()
            self.save(key, acc)
        return acc
