"""Bag remixing: Semantic Feature Remix (SFR) and a random-sampling baseline.

Both methods take a donor bag ``a`` whose finest label is strictly more
urgent than the recipient bag ``b``'s, keep every instance of ``b`` and add a
subset of ``a``'s instances.  The result carries ``a``'s labels.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .hierarchy import Hierarchy
from .synth import Bag


class RemixError(ValueError):
    code = "precondition"


@dataclass(frozen=True)
class SfrParams:
    num_clusters: int = 11
    refine_iters: int = 6
    top_k: int = 6
    seed: int = 0

    def validate(self) -> None:
        if self.num_clusters < 2:
            raise RemixError("num_clusters must be at least 2")
        if self.refine_iters < 0:
            raise RemixError("refine_iters must be non-negative")
        if not 1 <= self.top_k < self.num_clusters:
            raise RemixError(f"top_k must satisfy 1 <= k < L, got k={self.top_k}, L={self.num_clusters}")


@dataclass
class ClusterAssignment:
    cluster_of: np.ndarray      # (n_a + n_b,)
    prototypes: np.ndarray      # (L, d); NaN rows for clusters that never had members
    from_a: np.ndarray          # (n_a + n_b,) bool


@dataclass
class Selection:
    selected_a: np.ndarray      # sorted indices into bag a
    assignment: ClusterAssignment | None
    cluster_order: list[int]
    flags: frozenset[str] = frozenset()


def check_pair(bag_a: Bag, bag_b: Bag, hierarchy: Hierarchy) -> None:
    if bag_a.dim != bag_b.dim:
        raise RemixError(f"feature dimension mismatch: {bag_a.dim} vs {bag_b.dim}")
    lvl = hierarchy.finest
    if not hierarchy.is_severe(lvl, predicted=bag_b.finest_label, true_class=bag_a.finest_label):
        raise RemixError(f"bag {bag_a.id} (class {bag_a.finest_label}) is not strictly more urgent "
                         f"than bag {bag_b.id} (class {bag_b.finest_label})")


def _unit(x: np.ndarray):
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    zero = norms == 0
    return x / np.where(zero, 1.0, norms)[:, None], zero


def _similarities(units: np.ndarray, protos: np.ndarray, threads: int) -> np.ndarray:
    # einsum keeps each entry's reduction independent of how rows are chunked
    if threads <= 1 or units.shape[0] < 2 * threads:
        return np.einsum("id,ld->il", units, protos)
    chunks = np.array_split(np.arange(units.shape[0]), threads)
    with ThreadPoolExecutor(threads) as ex:
        parts = list(ex.map(lambda idx: np.einsum("id,ld->il", units[idx], protos), chunks))
    return np.concatenate(parts, axis=0)


def cluster(za: np.ndarray, zb: np.ndarray, params: SfrParams, *, literal_argmin: bool = False,
            threads: int = 1) -> tuple[ClusterAssignment, frozenset]:
    """Similarity-binned initialisation followed by ``refine_iters`` prototype reassignments."""
    L = params.num_clusters
    Z = np.concatenate([za, zb]).astype(np.float64)
    from_a = np.zeros(Z.shape[0], dtype=bool)
    from_a[: za.shape[0]] = True
    flags = set()
    units, zero = _unit(Z)
    if zero.any():
        flags.add("zero-norm-instance")
    top = L - 1   # bin of the global mean itself (similarity 1)

    ref = Z.mean(axis=0)
    if not np.any(ref):
        # no direction to compare against: fall back to the first non-zero instance
        flags.add("degenerate-global-mean")
        nz = np.flatnonzero(~zero)
        ref = Z[nz[0]] if nz.size else np.ones(Z.shape[1])
    ref_unit = ref / np.linalg.norm(ref)
    s = np.clip(units @ ref_unit, -1.0, 1.0)
    # bins [-1 + 2l/L, -1 + 2(l+1)/L), top bin closed at 1
    assign = np.minimum(np.floor((s + 1.0) * L / 2.0).astype(np.int64), L - 1)
    assign[zero] = top

    protos = np.full((L, Z.shape[1]), np.nan)
    for _ in range(params.refine_iters):
        for l in range(L):
            members = assign == l
            if members.any():
                protos[l] = Z[members].mean(axis=0)
        valid = ~np.isnan(protos[:, 0])
        punits, _ = _unit(np.where(valid[:, None], protos, 0.0))
        sims = _similarities(units, punits, threads)
        if literal_argmin:
            sims = np.where(valid[None, :], sims, np.inf)
            new = np.argmin(sims, axis=1)
        else:
            sims = np.where(valid[None, :], sims, -np.inf)
            new = np.argmax(sims, axis=1)
        new[zero] = top
        assign = new
    for l in range(L):
        members = assign == l
        if members.any():
            protos[l] = Z[members].mean(axis=0)
    return ClusterAssignment(assign, protos, from_a), frozenset(flags)


def sfr_select(bag_a: Bag, bag_b: Bag, hierarchy: Hierarchy, params: SfrParams, *,
               literal_argmin: bool = False, threads: int = 1) -> Selection:
    params.validate()
    check_pair(bag_a, bag_b, hierarchy)
    asg, flags = cluster(bag_a.instances, bag_b.instances, params,
                         literal_argmin=literal_argmin, threads=threads)
    L = params.num_clusters
    sizes = np.bincount(asg.cluster_of, minlength=L)
    from_a = np.bincount(asg.cluster_of, weights=asg.from_a, minlength=L)
    share = [from_a[l] / sizes[l] if sizes[l] else -1.0 for l in range(L)]
    order = sorted(range(L), key=lambda l: (-share[l], l))
    chosen = np.isin(asg.cluster_of[: bag_a.n], order[: params.top_k])
    return Selection(np.flatnonzero(chosen), asg, order, flags)


def _merge(bag_a: Bag, bag_b: Bag, selected: np.ndarray) -> Bag:
    x = np.concatenate([bag_b.instances, bag_a.instances[selected]])
    inst = None
    if bag_a.instance_labels is not None and bag_b.instance_labels is not None:
        inst = np.concatenate([bag_b.instance_labels, bag_a.instance_labels[selected]])
    return Bag(f"{bag_a.id}+{bag_b.id}", x, bag_a.labels, inst)


def sfr(bag_a: Bag, bag_b: Bag, hierarchy: Hierarchy, params: SfrParams, *,
        literal_argmin: bool = False, threads: int = 1) -> Bag:
    """Semantic Feature Remix of donor ``bag_a`` into recipient ``bag_b``.

    Instances of both bags are clustered by cosine similarity, clusters are
    ranked by the share of members that came from ``bag_a`` (ties go to the
    lower cluster index), and ``bag_a``'s members of the top ``k`` clusters
    are appended to ``bag_b``.
    """
    sel = sfr_select(bag_a, bag_b, hierarchy, params, literal_argmin=literal_argmin, threads=threads)
    return _merge(bag_a, bag_b, sel.selected_a)


def random_select(bag_a: Bag, bag_b: Bag, hierarchy: Hierarchy, fraction: float, seed) -> Selection:
    if not 0 < fraction <= 1:
        raise RemixError("fraction must lie in (0, 1]")
    check_pair(bag_a, bag_b, hierarchy)
    rng = np.random.default_rng(seed)
    m = max(1, math.ceil(fraction * bag_a.n))
    idx = np.sort(rng.choice(bag_a.n, size=m, replace=False))
    return Selection(idx, None, [])


def random_mix(bag_a: Bag, bag_b: Bag, hierarchy: Hierarchy, fraction: float, seed) -> Bag:
    """Append ``ceil(fraction * n_a)`` instances of ``bag_a`` sampled without replacement."""
    return _merge(bag_a, bag_b, random_select(bag_a, bag_b, hierarchy, fraction, seed).selected_a)


def remix_pairs(bags, hierarchy: Hierarchy) -> list[tuple[int, int]]:
    """For each recipient, the first later bag (cyclically) that may serve as its donor."""
    pairs = []
    n = len(bags)
    lvl = hierarchy.finest
    for b in range(n):
        for off in range(1, n):
            a = (b + off) % n
            if hierarchy.is_severe(lvl, bags[b].finest_label, bags[a].finest_label):
                pairs.append((a, b))
                break
    return pairs


def bench_remix(corpus, hierarchy: Hierarchy, method: str, params: SfrParams | None = None,
                fraction: float = 0.5, repetitions: int = 3) -> dict:
    """Wall-clock seconds per remixed sample, averaged over every valid pair in the corpus."""
    if len(corpus) < 2:
        raise RemixError("bench needs at least two bags")
    if repetitions < 1:
        raise ValueError("repetitions must be positive")
    pairs = remix_pairs(corpus, hierarchy)
    if not pairs:
        raise RemixError("corpus has no valid donor/recipient pair")
    params = params or SfrParams()
    if method == "sfr":
        run = lambda a, b: sfr(corpus[a], corpus[b], hierarchy, params)
    elif method == "random_mix":
        run = lambda a, b: random_mix(corpus[a], corpus[b], hierarchy, fraction, [params.seed, a, b])
    else:
        raise ValueError(f"unknown remix method {method!r}")
    per_rep = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        for a, b in pairs:
            run(a, b)
        per_rep.append((time.perf_counter() - t0) / len(pairs))
    sizes = np.array([bag.n for bag in corpus])
    return {
        "method": method,
        "L": params.num_clusters,
        "T": params.refine_iters,
        "k": params.top_k,
        "fraction": fraction if method == "random_mix" else None,
        "pairs": len(pairs),
        "repetitions": repetitions,
        "n_mean": float(sizes.mean()),
        "n_min": int(sizes.min()),
        "n_max": int(sizes.max()),
        "timing": {
            "mean_seconds_per_sample": float(np.mean(per_rep)),
            "std_seconds_per_sample": float(np.std(per_rep)),
            "per_repetition": per_rep,
        },
    }
