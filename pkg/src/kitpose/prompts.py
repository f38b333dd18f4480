"""Instance-level body part prompts.

Keypoint tokens are clustered with k-medoids++ (KKZ initialization, medoid
update by minimum within-cluster sum of squared distances) into body part
biases; a small conv stack (NanoBlock) extracts per-instance context tokens
from the backbone features; prompts are the elementwise sum of the two.

Clustering runs outside the gradient tape: medoid selection is discrete,
so the bias branch carries no gradient.  All tie-breaks favour the lowest
index, which makes the whole procedure bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import ChannelNorm, Conv2dLayer, Linear
from .tensor import Tensor

__all__ = ["PromptConfig", "ClusterResult", "kkz_init", "kmedoids_cluster",
           "NanoBlock", "nanoblock_context", "make_body_part_prompts"]


@dataclass
class PromptConfig:
    """Clustering hyperparameters.

    `refine` enables the deterministic local-search stage (strictly
    improving medoid swaps plus greedy restarts) that runs after the plain
    alternation; the alternation alone stalls in poor local optima on
    unstructured data.
    """

    n_prompts: int = 4
    metric: str = "euclidean"
    threshold: float = 1e-6
    max_iters: int = 100
    refine: bool = True

    def __post_init__(self):
        if self.n_prompts < 1:
            raise ValueError("n_prompts must be >= 1")
        if self.metric not in ("euclidean", "cosine"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")


@dataclass
class ClusterResult:
    medoid_indices: list[int]
    assignment: np.ndarray
    biases: np.ndarray
    iterations: int
    converged: bool
    objective: float
    objective_trace: list[float] = field(default_factory=list)


def _pairwise_dist(a: np.ndarray, b: np.ndarray, metric: str) -> np.ndarray:
    """Distance matrix between rows of a [n, c] and rows of b [m, c]."""
    if metric == "euclidean":
        diff = a[:, None, :] - b[None, :, :]
        return np.sqrt(np.maximum((diff * diff).sum(axis=2), 0.0))
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    denom = np.maximum(na @ nb.T, 1e-12)
    return 1.0 - (a @ b.T) / denom


def _as_array(tokens) -> np.ndarray:
    arr = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens)
    if arr.ndim != 2:
        raise ValueError("tokens must be [N, C]")
    return np.asarray(arr, dtype=np.float64)


def kkz_init(tokens, n_prompts: int, metric: str = "euclidean") -> list[int]:
    """Deterministic medoid seeding.

    The first medoid is the token with the largest l2 norm; each following
    medoid maximizes the minimum distance to the ones already chosen.  Ties
    go to the lowest index.
    """
    arr = _as_array(tokens)
    n = arr.shape[0]
    if n_prompts > n:
        raise ValueError(f"cannot pick {n_prompts} medoids from {n} tokens")
    chosen = [int(np.argmax(np.linalg.norm(arr, axis=1)))]
    while len(chosen) < n_prompts:
        d = _pairwise_dist(arr, arr[chosen], metric)
        min_d = d.min(axis=1)
        min_d[chosen] = -np.inf
        chosen.append(int(np.argmax(min_d)))
    return chosen


def _greedy_chain(d2: np.ndarray, first: int, k: int) -> list[int]:
    """Farthest-point seeding starting from a given index."""
    chosen = [first]
    while len(chosen) < k:
        min_d = d2[:, chosen].min(axis=1)
        min_d[chosen] = -np.inf
        chosen.append(int(np.argmax(min_d)))
    return chosen


def _objective_of(d2: np.ndarray, medoids: list[int]) -> float:
    return float(d2[:, medoids].min(axis=1).sum())


def _alternate(d2: np.ndarray, medoids: list[int], threshold: float,
               max_iters: int, trace: list[float]):
    """Assignment / member-update alternation; returns convergence info."""
    n = d2.shape[0]
    k = len(medoids)
    converged = False
    iterations = 0
    assignment = np.argmin(d2[:, medoids], axis=1)
    for iterations in range(1, max_iters + 1):
        prev = list(medoids)
        assignment = np.argmin(d2[:, medoids], axis=1)
        reseeded = False
        for j in range(k):
            members = np.flatnonzero(assignment == j)
            if members.size == 0:
                far = d2[:, medoids].min(axis=1)
                far[medoids] = -np.inf
                medoids[j] = int(np.argmax(far))
                reseeded = True
                continue
            cost = d2[np.ix_(members, members)].sum(axis=1)
            medoids[j] = int(members[np.argmin(cost)])

        obj = _objective_of(d2, medoids)
        if trace and not reseeded and obj > trace[-1] + 1e-9:
            raise AssertionError("clustering objective increased")
        trace.append(obj)

        if medoids == prev:
            converged = True
            break
        shift = np.sqrt(np.maximum(np.diagonal(d2[np.ix_(prev, medoids)]), 0.0))
        if float(shift.max()) < threshold:
            converged = True
            break
    return medoids, iterations, converged


def _best_swap(d2: np.ndarray, medoids: list[int]) -> list[int] | None:
    """Best strictly improving single-medoid replacement, if any."""
    n = d2.shape[0]
    cur = _objective_of(d2, medoids)
    best_obj = cur
    best = None
    in_set = np.zeros(n, dtype=bool)
    in_set[medoids] = True
    for j in range(len(medoids)):
        others = [m for i, m in enumerate(medoids) if i != j]
        rest = d2[:, others].min(axis=1) if others else np.full(n, np.inf)
        # objective with medoid j replaced by each candidate, all at once
        cand_obj = np.minimum(rest[:, None], d2).sum(axis=0)
        cand_obj[in_set] = np.inf
        c = int(np.argmin(cand_obj))
        if cand_obj[c] < best_obj - 1e-12:
            best_obj = float(cand_obj[c])
            best = [m if i != j else c for i, m in enumerate(medoids)]
    return best


def _refine(d2: np.ndarray, medoids: list[int], threshold: float,
            max_iters: int, trace: list[float]) -> list[int]:
    """Interleave strictly improving swaps with re-alternation."""
    while True:
        swapped = _best_swap(d2, medoids)
        if swapped is None:
            return medoids
        trace.append(_objective_of(d2, swapped))
        medoids, _, _ = _alternate(d2, swapped, threshold, max_iters, trace)


def _build_chain(d2: np.ndarray, k: int) -> list[int]:
    """Greedy seeding that adds the medoid reducing the objective the most."""
    chosen = [int(np.argmin(d2.sum(axis=0)))]
    while len(chosen) < k:
        cur = d2[:, chosen].min(axis=1)
        cand_obj = np.minimum(cur[:, None], d2).sum(axis=0)
        cand_obj[chosen] = np.inf
        chosen.append(int(np.argmin(cand_obj)))
    return chosen


def _kick_starts(d2: np.ndarray, medoids: list[int], n_far: int = 3) -> list[list[int]]:
    """Cross-basin restarts: plant a medoid deep inside another cluster.

    Single swaps cannot reach optima whose medoids both lie inside one
    incumbent cluster (the objective rises before re-alternation recovers
    it), so these trial starts move each spare medoid onto one of the
    farthest members of every cluster.
    """
    assign = np.argmin(d2[:, medoids], axis=1)
    out = []
    for j in range(len(medoids)):
        members = np.flatnonzero(assign == j)
        if members.size < 2:
            continue
        far_order = members[np.argsort(-d2[members, medoids[j]], kind="stable")]
        for far in far_order[:n_far]:
            if far in medoids:
                continue
            for i in range(len(medoids)):
                if i == j:
                    continue
                trial = list(medoids)
                trial[i] = int(far)
                out.append(trial)
    return out


def kmedoids_cluster(tokens, cfg: PromptConfig) -> ClusterResult:
    """k-medoids++ clustering of keypoint tokens.

    Alternates nearest-medoid assignment with a medoid update that picks,
    per cluster, the member minimizing the within-cluster sum of squared
    distances, starting from the KKZ seeds.  Stops when the medoid set is
    unchanged, when the largest medoid shift drops below cfg.threshold, or
    at cfg.max_iters.  An empty cluster is repaired by reseeding its
    medoid with the farthest non-medoid token.

    With cfg.refine the converged set is improved by strictly decreasing
    medoid swaps and deterministic greedy restarts (one per token); the
    KKZ-seeded solution is kept on ties, so the result stays reproducible
    and the objective trace stays non-increasing.
    """
    arr = _as_array(tokens)
    n = arr.shape[0]
    k = cfg.n_prompts
    if k > n:
        raise ValueError(f"cannot form {k} clusters from {n} tokens")
    d = _pairwise_dist(arr, arr, cfg.metric)
    d2 = d * d

    trace: list[float] = []
    medoids, iterations, converged = _alternate(
        d2, kkz_init(arr, k, cfg.metric), cfg.threshold, cfg.max_iters, trace)

    if cfg.refine:
        solved: dict[tuple, list[int]] = {}

        def solved_from(start: list[int]) -> list[int]:
            key = tuple(sorted(start))
            hit = solved.get(key)
            if hit is not None:
                return hit
            side: list[float] = []
            med, _, _ = _alternate(d2, start, cfg.threshold, cfg.max_iters, side)
            med = _refine(d2, med, cfg.threshold, cfg.max_iters, side)
            solved[key] = med
            return med

        medoids = _refine(d2, medoids, cfg.threshold, cfg.max_iters, trace)
        solved[tuple(sorted(medoids))] = medoids
        best_obj = _objective_of(d2, medoids)
        seen = {tuple(sorted(medoids))}
        starts = [_build_chain(d2, k)] + [_greedy_chain(d2, s, k) for s in range(n)]
        for start in starts:
            key = tuple(sorted(start))
            if key in seen:
                continue
            seen.add(key)
            alt = solved_from(start)
            obj = _objective_of(d2, alt)
            if obj < best_obj - 1e-12:
                best_obj = obj
                medoids = alt
        improved = True
        while improved:
            improved = False
            for kick in _kick_starts(d2, medoids):
                alt = solved_from(kick)
                obj = _objective_of(d2, alt)
                if obj < best_obj - 1e-12:
                    best_obj = obj
                    medoids = alt
                    improved = True
                    break
        if trace and best_obj < trace[-1]:
            trace.append(best_obj)

    assignment = np.argmin(d2[:, medoids], axis=1)
    biases = np.stack([arr[assignment == j].mean(axis=0) if (assignment == j).any()
                       else arr[medoids[j]] for j in range(k)])
    return ClusterResult(
        medoid_indices=list(medoids),
        assignment=assignment,
        biases=biases,
        iterations=iterations,
        converged=converged,
        objective=_objective_of(d2, medoids),
        objective_trace=trace,
    )


class NanoBlock:
    """Two Conv-Norm-ReLU stages plus a linear map to context tokens.

    The second conv emits one channel per prompt; each channel is flattened
    over the spatial grid and projected to the embedding width by a shared
    linear layer, yielding context tokens [n_prompts, embed_dim].
    """

    def __init__(self, rng, in_channels: int, hidden: int, n_prompts: int,
                 spatial: tuple[int, int], embed_dim: int):
        self.conv1 = Conv2dLayer(rng, in_channels, hidden, kernel=3)
        self.norm1 = ChannelNorm(hidden)
        self.conv2 = Conv2dLayer(rng, hidden, n_prompts, kernel=3)
        self.norm2 = ChannelNorm(n_prompts)
        self.proj = Linear(rng, spatial[0] * spatial[1], embed_dim)
        self.n_prompts = n_prompts
        self.spatial = tuple(spatial)

    def __call__(self, f_i: Tensor) -> Tensor:
        if f_i.shape[1:] != self.spatial:
            raise ValueError(f"expected {self.spatial} feature grid, got {f_i.shape[1:]}")
        x = T.relu(self.norm1(self.conv1(f_i)))
        x = T.relu(self.norm2(self.conv2(x)))
        flat = T.reshape(x, (self.n_prompts, self.spatial[0] * self.spatial[1]))
        return self.proj(flat)

    def named_params(self, prefix: str):
        yield from self.conv1.named_params(f"{prefix}.conv1")
        yield from self.norm1.named_params(f"{prefix}.norm1")
        yield from self.conv2.named_params(f"{prefix}.conv2")
        yield from self.norm2.named_params(f"{prefix}.norm2")
        yield from self.proj.named_params(f"{prefix}.proj")


def nanoblock_context(f_i: Tensor, block: NanoBlock) -> Tensor:
    """Context tokens T_c from backbone features."""
    return block(f_i)


def make_body_part_prompts(tokens: Tensor, f_i: Tensor, cfg: PromptConfig,
                           block: NanoBlock,
                           dbp_override: np.ndarray | None = None
                           ) -> tuple[Tensor, ClusterResult | None]:
    """Fuse clustered body part biases with learned context tokens.

    P_bp = Delta_bp + T_c.  The bias rows follow medoid discovery order and
    are detached from the tape; gradient reaches the prompts only through
    the context branch.  `dbp_override` substitutes precomputed biases
    (used by the finite-difference harness, where the discrete clustering
    must be held fixed).
    """
    cluster = None
    if dbp_override is not None:
        biases = np.asarray(dbp_override)
    else:
        cluster = kmedoids_cluster(T.stop_gradient(tokens), cfg)
        biases = cluster.biases
    if biases.shape != (cfg.n_prompts, tokens.shape[1]):
        raise ValueError("bias shape does not match (n_prompts, embed_dim)")
    delta = Tensor(biases.astype(T.default_dtype()))
    return delta + block(f_i), cluster
