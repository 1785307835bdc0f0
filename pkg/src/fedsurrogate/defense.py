"""The three-stage defense pipeline and the FedAvg control aggregator.

Stage 1: per-layer divergence ranking, then density clustering of updates
restricted to the critical layers -> coarse trusted set / suspects.
Stage 2: population-referenced alignment scoring with persistent per-client
memory; IQR screening demotes trusted outliers, an adaptive cutoff rescues
suspects.
Stage 3: flagged clients have their critical layers replaced by those of
their nearest trusted donor, then aggregation applies differential weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .clustering import hdbscan, largest_cluster
from .params import (
    EPS_ZERO,
    ClientUpdate,
    ParameterVector,
    cosine_distance,
    pairwise_distance_matrix,
)

# At 20-client scale a coordinated minority can be as small as 3-4
# clients; min_samples must stay below that for the group to register as
# dense, so the coarse stage defaults lower than the usual literature 5.
DEFAULT_MIN_SAMPLES = 3

# Distance radius below which the coarse clustering refuses to split a
# cluster, so benign micro-structure cannot fragment the honest mass.
COARSE_SELECTION_EPSILON = 0.5


@dataclass(frozen=True)
class LcaConfig:
    """Critical-layer selection: top-k by normalised divergence (default),
    or a MAD threshold with sensitivity sigma."""

    top_k: int = 5
    sigma: float = 2.0
    mode: str = "top_k"  # or "mad_threshold"

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.mode not in ("top_k", "mad_threshold"):
            raise ValueError(f"unknown LCA mode {self.mode!r}")
        if self.mode == "mad_threshold" and self.sigma <= 0:
            raise ValueError("sigma must be positive in mad_threshold mode")


@dataclass(frozen=True)
class FilterConfig:
    zeta: float = 0.4
    iqr_multiplier: float = 1.5
    rescue_layers: tuple[str, ...] = ()

    def __post_init__(self):
        if not 0.0 < self.zeta <= 1.0:
            raise ValueError("zeta must be in (0, 1]")


@dataclass(frozen=True)
class AggregationWeights:
    trusted: float = 1.0
    rescued: float = 0.7
    surrogate: float = 0.3

    def __post_init__(self):
        if not 0.0 < self.surrogate <= self.rescued <= self.trusted:
            raise ValueError("need 0 < surrogate <= rescued <= trusted")


@dataclass(frozen=True)
class ScoreMemory:
    """Cumulative per-client anomaly scores (running mean) and counts."""

    cumulative: dict[int, float] = field(default_factory=dict)
    counts: dict[int, int] = field(default_factory=dict)

    def score(self, client_id: int) -> float:
        return self.cumulative[client_id]


@dataclass(frozen=True)
class RoundOutcome:
    critical_layers: tuple[str, ...]
    distance_matrix: np.ndarray
    coarse_trusted: frozenset[int]      # post-demotion
    suspects: frozenset[int]            # at rescue entry (incl. demoted)
    demoted: frozenset[int]
    rescued: frozenset[int]
    confirmed_malicious: frozenset[int]
    trusted: frozenset[int]             # coarse_trusted | rescued
    donors: dict[int, int]
    global_after: ParameterVector
    degenerate: bool = False

    def __post_init__(self):
        parts = [self.coarse_trusted, self.rescued, self.confirmed_malicious]
        union = frozenset().union(*parts)
        if sum(len(p) for p in parts) != len(union):
            raise ValueError("outcome sets overlap")
        if self.trusted != self.coarse_trusted | self.rescued:
            raise ValueError("trusted != coarse_trusted | rescued")


# ---------------------------------------------------------------------------
# Stage 1
# ---------------------------------------------------------------------------

def layer_divergence(updates: Sequence[ClientUpdate]) -> dict[str, float]:
    """Mean pairwise cosine distance of the clients' deltas, per layer."""
    if len(updates) < 2:
        raise ValueError("need at least two updates")
    schema = updates[0].delta.schema
    out: dict[str, float] = {}
    n = len(updates)
    for name in schema.names:
        slices = [u.delta.layer(name) for u in updates]
        total = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                total += cosine_distance(slices[i], slices[j])
        out[name] = total * 2.0 / (n * (n - 1))
    return out


def select_critical_layers(
    divergences: Mapping[str, float], cfg: LcaConfig
) -> tuple[tuple[str, ...], bool]:
    """Critical layer set by normalised divergence; second element flags a
    degenerate round (all-zero divergence)."""
    names = list(divergences)
    if not names:
        raise ValueError("no layers")
    d = np.array([divergences[n] for n in names])
    med = float(np.median(d))
    k = min(cfg.top_k, len(names))
    if med <= 0.0:
        return tuple(names[:k]), True
    dn = d / med
    if cfg.mode == "top_k":
        # ties resolved by schema order: stable sort on negated score
        order = np.argsort(-dn, kind="stable")[:k]
        return tuple(names[i] for i in sorted(order)), False
    mad = float(np.median(np.abs(dn - np.median(dn))))
    chosen = [n for n, v in zip(names, dn) if v > 1.0 + cfg.sigma * mad]
    if not chosen:  # threshold above every layer: fall back to the top layer
        chosen = [names[int(np.argmax(dn))]]
    return tuple(chosen), False


def coarse_cluster(
    updates: Sequence[ClientUpdate],
    critical_layers: Sequence[str],
    min_samples: int = DEFAULT_MIN_SAMPLES,
) -> tuple[frozenset[int], frozenset[int], np.ndarray, bool]:
    """Cluster the critical-layer deltas; the largest cluster is accepted
    as the coarse trusted set when it carries a strict majority.

    Returns (coarse trusted, suspects, euclidean distance matrix,
    degenerate). Distances are euclidean rather than cosine: honest
    updates agree in both direction and magnitude, while an attacker
    must either diverge in direction or inflate magnitude to matter, and
    only euclidean geometry sees both. The density clustering itself
    runs with min_cluster_size = min_samples + 1 so genuinely dense
    subgroups always surface as clusters; the majority condition is
    applied afterwards. Splits at distance below
    COARSE_SELECTION_EPSILON are suppressed, which stops local
    sub-structure inside the honest mass from fragmenting it below the
    majority threshold.
    """
    if not critical_layers:
        raise ValueError("empty critical layer set")
    n = len(updates)
    ids = [u.client_id for u in updates]
    feats = [u.delta.restricted(critical_layers) for u in updates]
    D = pairwise_distance_matrix(feats, metric="euclidean")
    ms = min(min_samples, n - 1)
    result = hdbscan(D, min_cluster_size=ms + 1, min_samples=ms,
                     selection_epsilon=COARSE_SELECTION_EPSILON)
    majority = n // 2 + 1
    biggest = largest_cluster(result)
    if len(biggest) >= majority:
        trusted = frozenset(ids[i] for i in biggest)
        suspects = frozenset(ids) - trusted
        return trusted, suspects, D, False
    # no majority cluster: degrade to Stage-2-only filtering
    return frozenset(ids), frozenset(), D, True


# ---------------------------------------------------------------------------
# Stage 2
# ---------------------------------------------------------------------------

def alignment_scores(
    updates: Sequence[ClientUpdate],
    global_model: ParameterVector,
    rescue_layers: Sequence[str],
) -> dict[int, float]:
    """Instantaneous alignment of each client's mid-deep weights with the
    population-weighted mean update direction, in [-1, 1]."""
    counts = np.array([u.sample_count for u in updates], dtype=np.float64)
    if counts.sum() <= 0:
        raise ValueError("total sample count must be positive")
    omega = counts / counts.sum()
    W = np.stack([u.model.restricted(rescue_layers) for u in updates])
    g_ref = global_model.restricted(rescue_layers)
    G = W - g_ref
    w_star = omega @ W
    g_star = omega @ G
    g_norm = float(np.linalg.norm(g_star))
    out: dict[int, float] = {}
    for u, w in zip(updates, W):
        diff = w - w_star
        d_norm = float(np.linalg.norm(diff))
        if d_norm < EPS_ZERO or g_norm < EPS_ZERO:
            out[u.client_id] = 0.0
        else:
            out[u.client_id] = float(np.dot(diff, g_star)) / (d_norm * g_norm)
    return out


def update_memory(mem: ScoreMemory, raw: Mapping[int, float]) -> ScoreMemory:
    """Fold this round's alignment scores into the running per-client mean.

    Raw scores are min-max scaled over the round so that HIGH memory
    means suspicious: attackers train longer and reinforce each other, so
    their deviation from the mean model aligns with (and dominates) the
    population update direction, while benign deviations are
    heterogeneity noise. An all-equal round contributes a neutral 0.5.
    """
    if len(raw) < 2:
        raise ValueError("need at least two scored clients")
    values = np.array(list(raw.values()))
    lo, hi = float(values.min()), float(values.max())
    cumulative = dict(mem.cumulative)
    counts = dict(mem.counts)
    for cid, s in raw.items():
        anomaly = 0.5 if hi - lo < EPS_ZERO else (s - lo) / (hi - lo)
        m = counts.get(cid, 0) + 1
        prev = cumulative.get(cid, 0.0)
        cumulative[cid] = (m - 1) / m * prev + anomaly / m
        counts[cid] = m
    return ScoreMemory(cumulative, counts)


def screen_trusted(
    mem: ScoreMemory, coarse_trusted: frozenset[int], cfg: FilterConfig
) -> frozenset[int]:
    """Demote trusted clients whose memory score exceeds the upper IQR
    fence. Quartiles need at least four scores to mean anything."""
    if len(coarse_trusted) < 4:
        return frozenset()
    members = sorted(coarse_trusted)
    scores = np.array([mem.score(c) for c in members])
    q1, q3 = np.percentile(scores, [25.0, 75.0])  # linear interpolation
    fence = q3 + cfg.iqr_multiplier * (q3 - q1)
    return frozenset(c for c, s in zip(members, scores) if s > fence)


def rescue_suspects(
    mem: ScoreMemory, suspects: frozenset[int], cfg: FilterConfig
) -> tuple[frozenset[int], frozenset[int]]:
    """Split suspects into rescued (score <= adaptive cutoff) and
    confirmed malicious."""
    if not suspects:
        return frozenset(), frozenset()
    scores = {c: mem.score(c) for c in suspects}
    cutoff = min(cfg.zeta, float(np.median(list(scores.values()))))
    rescued = frozenset(c for c, s in scores.items() if s <= cutoff)
    return rescued, suspects - rescued


# ---------------------------------------------------------------------------
# Stage 3
# ---------------------------------------------------------------------------

def select_donor(
    flagged: int,
    trusted: frozenset[int],
    D: np.ndarray,
    index_of: Mapping[int, int],
    metric: str = "cosine",
    features: Sequence[np.ndarray] | None = None,
) -> int:
    """Nearest trusted donor for a flagged client; ties by lower id.

    ``index_of`` maps client ids to rows of D / features. When features
    are given, distances are recomputed on the critical-layer features
    under the requested metric; otherwise D is consulted directly."""
    if not trusted:
        raise ValueError("no trusted clients to donate")
    if metric not in ("cosine", "euclidean"):
        raise ValueError(f"unknown donor metric {metric!r}")
    fi = index_of[flagged]
    best_id, best_d = -1, np.inf
    for cid in sorted(trusted):
        if features is None:
            d = D[fi, index_of[cid]]
        elif metric == "cosine":
            d = cosine_distance(features[fi], features[index_of[cid]])
        else:
            d = float(np.linalg.norm(features[fi] - features[index_of[cid]]))
        if d < best_d:
            best_id, best_d = cid, d
    return best_id


def build_surrogate(
    theta_f: ParameterVector,
    theta_donor: ParameterVector,
    critical_layers: Sequence[str],
) -> ParameterVector:
    """Critical layers from the donor, every other layer from the flagged
    client."""
    if theta_f.schema != theta_donor.schema:
        raise ValueError("schemas differ")
    values = theta_f.values.copy()
    for name in critical_layers:
        lo, hi = theta_f.schema.bounds(name)
        values[lo:hi] = theta_donor.values[lo:hi]
    return ParameterVector(values, theta_f.schema)


def aggregate(
    models: Mapping[int, ParameterVector],
    roles: Mapping[int, str],
    weights: AggregationWeights,
) -> ParameterVector:
    """Weighted mean with per-role weights (trusted / rescued / surrogate)."""
    if not models:
        raise ValueError("nothing to aggregate")
    lam = {"trusted": weights.trusted, "rescued": weights.rescued,
           "surrogate": weights.surrogate}
    first = next(iter(models.values()))
    acc = np.zeros_like(first.values)
    total = 0.0
    for cid in sorted(models):
        w = lam[roles[cid]]
        acc += w * models[cid].values
        total += w
    return ParameterVector(acc / total, first.schema)


def fedavg_aggregate(models: Mapping[int, ParameterVector],
                     sample_counts: Mapping[int, int]) -> ParameterVector:
    """Sample-size-weighted mean (the undefended control)."""
    if not models:
        raise ValueError("nothing to aggregate")
    total = float(sum(sample_counts[c] for c in models))
    first = next(iter(models.values()))
    acc = np.zeros_like(first.values)
    for cid in sorted(models):
        acc += (sample_counts[cid] / total) * models[cid].values
    return ParameterVector(acc, first.schema)


# ---------------------------------------------------------------------------
# Full round
# ---------------------------------------------------------------------------

def fedsurrogate_round(
    updates: Sequence[ClientUpdate],
    global_model: ParameterVector,
    mem: ScoreMemory,
    lca_cfg: LcaConfig,
    filter_cfg: FilterConfig,
    weights: AggregationWeights,
    min_samples: int = DEFAULT_MIN_SAMPLES,
    donor_metric: str = "cosine",
    variant: str = "full",
) -> tuple[ParameterVector, RoundOutcome, ScoreMemory]:
    """One server round of the full pipeline. Returns the new global
    model, the round's set partition, and the updated score memory.

    ``variant`` selects an ablation of the pipeline:
      - ``"full"``: all three stages (the default).
      - ``"stage1"``: coarse clustering only; suspects are excluded and the
        alignment filter never runs (score memory passes through unchanged).
      - ``"no_rescue"``: stages 1+2 but every suspect is confirmed, none
        rescued.
      - ``"exclude"``: all stages, but confirmed clients are dropped from
        aggregation instead of being replaced by surrogates.
    """
    if variant not in ("full", "stage1", "no_rescue", "exclude"):
        raise ValueError(f"unknown variant {variant!r}")
    if len(updates) < 2:
        raise ValueError("need at least two clients")
    ids = [u.client_id for u in updates]
    index_of = {cid: i for i, cid in enumerate(ids)}
    by_id = {u.client_id: u for u in updates}

    # Stage 1
    divergences = layer_divergence(updates)
    critical, degenerate_lca = select_critical_layers(divergences, lca_cfg)
    coarse, suspects, D, degenerate_cluster = coarse_cluster(updates, critical, min_samples)

    # Stage 2 (memory update precedes screening)
    if variant == "stage1":
        demoted, rescued = frozenset(), frozenset()
        flagged = frozenset(suspects)
    else:
        raw = alignment_scores(updates, global_model, filter_cfg.rescue_layers)
        mem = update_memory(mem, raw)
        demoted = screen_trusted(mem, coarse, filter_cfg)
        coarse = coarse - demoted
        suspects = suspects | demoted
        if variant == "no_rescue":
            rescued, flagged = frozenset(), frozenset(suspects)
        else:
            rescued, flagged = rescue_suspects(mem, suspects, filter_cfg)
    trusted = coarse | rescued

    # Stage 3
    feats = [by_id[c].delta.restricted(critical) for c in ids]
    donors: dict[int, int] = {}
    models: dict[int, ParameterVector] = {}
    roles: dict[int, str] = {}
    for cid in ids:
        if cid in coarse:
            models[cid], roles[cid] = by_id[cid].model, "trusted"
        elif cid in rescued:
            models[cid], roles[cid] = by_id[cid].model, "rescued"
    for cid in sorted(flagged):
        if variant in ("stage1", "exclude"):
            break
        if trusted:
            donor = select_donor(cid, trusted, D, index_of, donor_metric, feats)
            donors[cid] = donor
            models[cid] = build_surrogate(by_id[cid].model, by_id[donor].model, critical)
            roles[cid] = "surrogate"
        # no trusted clients at all: flagged updates are simply excluded

    new_global = aggregate(models, roles, weights) if models else global_model
    outcome = RoundOutcome(
        critical_layers=critical,
        distance_matrix=D,
        coarse_trusted=frozenset(coarse),
        suspects=frozenset(suspects),
        demoted=demoted,
        rescued=rescued,
        confirmed_malicious=flagged,
        trusted=trusted,
        donors=donors,
        global_after=new_global,
        degenerate=degenerate_lca or degenerate_cluster,
    )
    return new_global, outcome, mem
