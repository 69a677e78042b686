"""Deterministic synthetic QoS matrices shaped like the WSDREAM corpus.

The real response-time / throughput matrices are not redistributable with
this package, so experiments and the acceptance suite run against
generated stand-ins with the same shape (339 users x 5825 items), the
same observed-entry counts, non-negative heavy-tailed marginals, and a
planted structure worth learning:

* users come in small similarity clusters (a handful of true peers each),
* items come in service groups,
* values = base + user level + item level + cluster/group affinity + noise,
  clipped to the domain range.

Cluster-level structure is what makes peer information genuinely useful;
the noise floor is what keeps test error bounded away from zero.
"""

from dataclasses import dataclass

import numpy as np

from . import seeding
from .data import QosMatrix
from .errors import ConfigError


@dataclass(frozen=True)
class SynthSpec:
    """Fixed recipe for one synthetic dataset flavor."""

    name: str
    n_users: int
    n_items: int
    observed: int            # exact observed-entry count E
    value_cap: float
    base: float              # grand offset
    cluster_size: int        # users per similarity cluster
    item_groups: int
    rank: int                # latent affinity rank
    user_level_scale: float  # cluster-level user effect
    user_jitter: float       # personal deviation from the cluster level
    item_level_scale: float
    affinity_scale: float
    noise_scale: float       # Laplace noise on every entry
    spike_prob: float        # heavy-tail spikes (timeouts / stalls)
    spike_max: float


RT_SPEC = SynthSpec(
    name="rt", n_users=339, n_items=5825, observed=1_873_838,
    value_cap=20.0, base=0.3, cluster_size=6, item_groups=60, rank=8,
    user_level_scale=0.7, user_jitter=0.12, item_level_scale=0.45,
    affinity_scale=0.75, noise_scale=0.55, spike_prob=0.035, spike_max=19.0)

TP_SPEC = SynthSpec(
    name="tp", n_users=339, n_items=5825, observed=1_831_253,
    value_cap=1000.0, base=12.0, cluster_size=6, item_groups=60, rank=8,
    user_level_scale=38.0, user_jitter=6.0, item_level_scale=24.0,
    affinity_scale=40.0, noise_scale=28.0, spike_prob=0.02, spike_max=900.0)

SPECS = {"rt": RT_SPEC, "tp": TP_SPEC}


def spec_for(kind: str) -> SynthSpec:
    try:
        return SPECS[kind]
    except KeyError:
        raise ConfigError(f"unknown synthetic dataset kind {kind!r}; "
                          f"expected one of {sorted(SPECS)}")


def user_clusters(spec: SynthSpec, seed: int) -> np.ndarray:
    """Cluster id per user; deterministic for a (spec, seed) pair."""
    rng = seeding.stream(seed, seeding.SYNTH, 1)
    perm = rng.permutation(spec.n_users)
    clusters = np.empty(spec.n_users, dtype=np.int64)
    clusters[perm] = np.arange(spec.n_users) // spec.cluster_size
    return clusters


def generate_matrix(kind: str, seed: int = 7) -> QosMatrix:
    """Build one synthetic matrix; fully determined by (kind, seed)."""
    spec = spec_for(kind)
    rng = seeding.stream(seed, seeding.SYNTH, 0)

    clusters = user_clusters(spec, seed)
    n_clusters = int(clusters.max()) + 1
    groups = seeding.stream(seed, seeding.SYNTH, 2).integers(
        0, spec.item_groups, size=spec.n_items)

    # Cluster-level user effects with small personal jitter: peers in a
    # cluster genuinely predict each other.
    cluster_level = np.abs(rng.normal(0.0, spec.user_level_scale, size=n_clusters))
    user_level = cluster_level[clusters] + rng.normal(
        0.0, spec.user_jitter, size=spec.n_users)
    item_level = np.abs(rng.normal(0.0, spec.item_level_scale, size=spec.n_items))

    cluster_factors = rng.normal(0.0, 1.0, size=(n_clusters, spec.rank))
    user_factors = cluster_factors[clusters] + rng.normal(
        0.0, 0.25, size=(spec.n_users, spec.rank))
    group_factors = rng.normal(0.0, 1.0, size=(spec.item_groups, spec.rank))
    item_factors = group_factors[groups] + rng.normal(
        0.0, 0.25, size=(spec.n_items, spec.rank))

    affinity = (user_factors @ item_factors.T) * (spec.affinity_scale / spec.rank)
    values = (spec.base + user_level[:, None] + item_level[None, :] + affinity
              + rng.laplace(0.0, spec.noise_scale,
                            size=(spec.n_users, spec.n_items)))
    spikes = rng.random(values.shape) < spec.spike_prob
    values = values + spikes * rng.uniform(0.0, spec.spike_max, size=values.shape)
    values = np.clip(values, 0.0, spec.value_cap)

    total = spec.n_users * spec.n_items
    n_missing = total - spec.observed
    missing_flat = seeding.stream(seed, seeding.SYNTH, 3).choice(
        total, size=n_missing, replace=False)
    observed = np.ones(total, dtype=bool)
    observed[missing_flat] = False
    observed = observed.reshape(spec.n_users, spec.n_items)

    return QosMatrix(values=values, observed=observed, missing_mark=-1.0)
