"""Deterministic client-partition generators for the heterogeneity families:

E1   label shift (disjoint class blocks per cluster)
E2a  covariate shift via disjoint subclasses under a shared superclass task
E2b  covariate shift via right-angle image rotations
E3a  concept shift via different semantic label rules on the same inputs
E3b  concept shift via label permutations
E4a  domain shift (two datasets side by side)
E4b  concept shift stacked on covariate shift (2*C clusters)

Every generator takes (data, ..., clients_per_cluster, seed) and returns a
list of ClientShard ordered by client id. Client train shards are cut from the
dataset's official train split and test shards from the official test split,
both through the same transform, so each client is evaluated on data matching
its own distribution. Within a cluster, samples are shuffled with a child seed
derived from (seed, cluster_id) and dealt round-robin, giving equal shard
sizes up to one sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, DatasetPair, rotate_rows

ROTATION_ORDER = (0, 180, 90, 270)

SPARSITY_LEVELS = {
    "Rich": 5,
    "Medium": 10,
    "Sparse": 25,
    "VerySparse": 50,
    "SuperSparse": 100,
}


def sparsity_levels() -> dict[str, int]:
    """Named sparsity levels as clients per cluster (Rich=5 ... SuperSparse=100)."""
    return dict(SPARSITY_LEVELS)


@dataclass
class ClientShard:
    """One client's train/test data plus its ground-truth cluster identity."""

    client_id: int
    cluster_id: int
    train: Dataset
    test: Dataset
    stats: np.ndarray | None = None
    # set only by the combined family, where the cluster id factors into axes
    concept_id: int | None = None
    covariate_id: int | None = None

    def __post_init__(self):
        if len(self.train) == 0 or len(self.test) == 0:
            raise ValueError(f"client {self.client_id}: empty shard")


@dataclass(frozen=True)
class LabelRule:
    """A relabeling rule as an explicit lookup table old_label -> new_label."""

    name: str
    table: tuple[int, ...]

    @property
    def arity(self) -> int:
        return max(self.table) + 1

    def apply(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(self.table, dtype=np.int64)[y]


def identity_rule(class_count: int) -> LabelRule:
    return LabelRule("identity", tuple(range(class_count)))


def parity_rule(class_count: int) -> LabelRule:
    return LabelRule("parity", tuple(c % 2 for c in range(class_count)))


def antiparity_rule(class_count: int) -> LabelRule:
    """Parity with flipped labels: conflicts with parity on every class."""
    return LabelRule("antiparity", tuple(1 - c % 2 for c in range(class_count)))


def threshold_rule(class_count: int, cut: int = 5) -> LabelRule:
    return LabelRule(f"threshold{cut}", tuple(int(c >= cut) for c in range(class_count)))


def permutation_rule(perm: tuple[int, ...], name: str | None = None) -> LabelRule:
    if sorted(perm) != list(range(len(perm))):
        raise ValueError(f"not a permutation: {perm}")
    return LabelRule(name or f"perm{list(perm)}", tuple(perm))


def inverse_rule(rule: LabelRule) -> LabelRule:
    inv = [0] * len(rule.table)
    for i, p in enumerate(rule.table):
        inv[p] = i
    return LabelRule(f"inv({rule.name})", tuple(inv))


NAMED_RULES = {
    "identity": identity_rule,
    "parity": parity_rule,
    "antiparity": antiparity_rule,
    "threshold5": lambda c: threshold_rule(c, 5),
}


def rule_from_name(name: str, class_count: int) -> LabelRule:
    if name not in NAMED_RULES:
        raise ValueError(f"unknown label rule {name!r}; known: {sorted(NAMED_RULES)}")
    return NAMED_RULES[name](class_count)


# --------------------------------------------------------------------------
# shared machinery
# --------------------------------------------------------------------------

def _cluster_rng(seed: int, cluster_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(cluster_id)]))


def _deal(n: int, clients: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Seeded shuffle of range(n), dealt round-robin into `clients` hands."""
    order = rng.permutation(n)
    return [order[j::clients] for j in range(clients)]


def _make_cluster_shards(cluster_id: int, train: Dataset, test: Dataset,
                         clients_per_cluster: int, seed: int,
                         first_client_id: int) -> list[ClientShard]:
    rng = _cluster_rng(seed, cluster_id)
    train_hands = _deal(len(train), clients_per_cluster, rng)
    test_hands = _deal(len(test), clients_per_cluster, rng)
    shards = []
    for j in range(clients_per_cluster):
        shards.append(ClientShard(
            client_id=first_client_id + j,
            cluster_id=cluster_id,
            train=train.take(train_hands[j]),
            test=test.take(test_hands[j]),
        ))
    return shards


def _assemble(cluster_datasets: list[tuple[Dataset, Dataset]], clients_per_cluster: int,
              seed: int) -> list[ClientShard]:
    shards = []
    for cid, (tr, te) in enumerate(cluster_datasets):
        shards.extend(_make_cluster_shards(cid, tr, te, clients_per_cluster, seed,
                                           first_client_id=cid * clients_per_cluster))
    return shards


def class_blocks(class_count: int, K: int) -> list[list[int]]:
    """Contiguous class blocks; remainder classes go one-per-leading-cluster.

    C=10, K=3 -> [[0,1,2,3], [4,5,6], [7,8,9]].
    """
    if K > class_count:
        raise ValueError(f"K={K} exceeds class count {class_count}")
    base, rem = divmod(class_count, K)
    blocks, start = [], 0
    for k in range(K):
        size = base + (1 if k < rem else 0)
        blocks.append(list(range(start, start + size)))
        start += size
    return blocks


def _restrict_to_classes(ds: Dataset, classes: list[int]) -> Dataset:
    mask = np.isin(ds.y, classes)
    return ds.take(np.flatnonzero(mask))


# --------------------------------------------------------------------------
# partition generators
# --------------------------------------------------------------------------

def partition_label_shift(data: DatasetPair, K: int, clients_per_cluster: int,
                          seed: int) -> list[ClientShard]:
    """E1: cluster k gets the k-th contiguous block of classes."""
    blocks = class_blocks(data.train.class_count, K)
    clusters = [(_restrict_to_classes(data.train, b), _restrict_to_classes(data.test, b))
                for b in blocks]
    return _assemble(clusters, clients_per_cluster, seed)


def partition_covariate_subclass(data: DatasetPair, superclass: LabelRule,
                                 subclass_sets: list[list[int]],
                                 clients_per_cluster: int, seed: int) -> list[ClientShard]:
    """E2a: every cluster predicts the shared superclass labels but only sees
    its own disjoint set of original subclasses."""
    seen: set[int] = set()
    for s in subclass_sets:
        overlap = seen.intersection(s)
        if overlap:
            raise ValueError(f"subclass assignment overlaps on classes {sorted(overlap)}")
        seen.update(s)
    clusters = []
    for classes in subclass_sets:
        tr = _restrict_to_classes(data.train, classes)
        te = _restrict_to_classes(data.test, classes)
        tr = tr.with_labels(superclass.apply(tr.y), superclass.arity)
        te = te.with_labels(superclass.apply(te.y), superclass.arity)
        clusters.append((tr, te))
    return _assemble(clusters, clients_per_cluster, seed)


def partition_covariate_rotation(data: DatasetPair, K: int, clients_per_cluster: int,
                                 seed: int) -> list[ClientShard]:
    """E2b: cluster k sees images rotated by [0, 180, 90, 270][k]."""
    if not 1 <= K <= len(ROTATION_ORDER):
        raise ValueError(f"rotation family supports K in [1, 4], got {K}")
    if len(data.train.input_shape) != 2:
        raise ValueError("rotation partitioning needs 2-D image data")
    shape = data.train.input_shape
    # cluster membership: random equal split of the pool across clusters
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xE2B]))
    clusters = []
    splits_train = np.array_split(rng.permutation(len(data.train)), K)
    splits_test = np.array_split(rng.permutation(len(data.test)), K)
    for k in range(K):
        angle = ROTATION_ORDER[k]
        tr = data.train.take(splits_train[k])
        te = data.test.take(splits_test[k])
        tr = Dataset(tr.name, rotate_rows(tr.X, shape, angle), tr.y, tr.class_count, shape)
        te = Dataset(te.name, rotate_rows(te.X, shape, angle), te.y, te.class_count, shape)
        clusters.append((tr, te))
    return _assemble(clusters, clients_per_cluster, seed)


def partition_concept_semantic(data: DatasetPair, rules: list[LabelRule],
                               clients_per_cluster: int, seed: int) -> list[ClientShard]:
    """E3a: each cluster sees the full input distribution but relabels it with
    its own semantic rule; all rules must share the output arity."""
    arities = {r.arity for r in rules}
    if len(arities) != 1:
        raise ValueError(f"label rules disagree on output arity: {sorted(arities)}")
    arity = arities.pop()
    K = len(rules)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xE3A]))
    splits_train = np.array_split(rng.permutation(len(data.train)), K)
    splits_test = np.array_split(rng.permutation(len(data.test)), K)
    clusters = []
    for k, rule in enumerate(rules):
        tr = data.train.take(splits_train[k])
        te = data.test.take(splits_test[k])
        clusters.append((tr.with_labels(rule.apply(tr.y), arity),
                         te.with_labels(rule.apply(te.y), arity)))
    return _assemble(clusters, clients_per_cluster, seed)


def sample_derangements(class_count: int, count: int, seed: int) -> list[LabelRule]:
    """Seeded pairwise-distinct derangements of {0..C-1} (no fixed points)."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xE3B]))
    rules: list[LabelRule] = []
    seen = set()
    guard = 0
    while len(rules) < count:
        guard += 1
        if guard > 10000 * max(count, 1):
            raise RuntimeError("failed to sample enough distinct derangements")
        perm = tuple(int(v) for v in rng.permutation(class_count))
        if any(p == i for i, p in enumerate(perm)) or perm in seen:
            continue
        seen.add(perm)
        rules.append(permutation_rule(perm, name=f"derangement{len(rules)}"))
    return rules


def partition_concept_permutation(data: DatasetPair, K: int, clients_per_cluster: int,
                                  seed: int) -> list[ClientShard]:
    """E3b: cluster 0 keeps identity labels; clusters 1..K-1 apply seeded,
    pairwise-distinct derangements of the label set."""
    if K < 1:
        raise ValueError("K must be >= 1")
    C = data.train.class_count
    rules = [identity_rule(C)] + sample_derangements(C, K - 1, seed)
    return partition_concept_semantic(data, rules, clients_per_cluster, seed)


def partition_domain_shift(data_a: DatasetPair, data_b: DatasetPair,
                           clients_per_cluster: int, seed: int) -> list[ClientShard]:
    """E4a: cluster 0 is dataset A, cluster 1 is dataset B; labels untouched."""
    if data_a.train.class_count != data_b.train.class_count:
        raise ValueError("domain-shift datasets must share class_count")
    if tuple(data_a.train.input_shape) != tuple(data_b.train.input_shape):
        raise ValueError("domain-shift datasets must share input_shape")
    clusters = [(data_a.train, data_a.test), (data_b.train, data_b.test)]
    return _assemble(clusters, clients_per_cluster, seed)


def partition_combined(data: DatasetPair, concept_rules: list[LabelRule],
                       covariate_sets: list[list[int]], clients_per_cluster: int,
                       seed: int) -> list[ClientShard]:
    """E4b: 2 concept groups x C covariate clusters = 2C clusters.

    Cluster id is concept_index * C + covariate_index; both axes are also
    recorded separately on the shards for clustering diagnostics.
    """
    if len(concept_rules) != 2:
        raise ValueError("combined family takes exactly 2 concept rules")
    if len(covariate_sets) < 2:
        raise ValueError("combined family needs at least 2 covariate clusters")
    arities = {r.arity for r in concept_rules}
    if len(arities) != 1:
        raise ValueError("concept rules disagree on output arity")
    arity = arities.pop()
    seen: set[int] = set()
    for s in covariate_sets:
        overlap = seen.intersection(s)
        if overlap:
            raise ValueError(f"covariate sets overlap on classes {sorted(overlap)}")
        seen.update(s)
    C = len(covariate_sets)
    shards: list[ClientShard] = []
    for ci, rule in enumerate(concept_rules):
        for vj, classes in enumerate(covariate_sets):
            cluster_id = ci * C + vj
            tr = _restrict_to_classes(data.train, classes)
            te = _restrict_to_classes(data.test, classes)
            tr = tr.with_labels(rule.apply(tr.y), arity)
            te = te.with_labels(rule.apply(te.y), arity)
            cluster_shards = _make_cluster_shards(
                cluster_id, tr, te, clients_per_cluster, seed,
                first_client_id=cluster_id * clients_per_cluster)
            for s in cluster_shards:
                s.concept_id = ci
                s.covariate_id = vj
            shards.extend(cluster_shards)
    return shards


def paired_covariate_sets(class_count: int, C: int) -> list[list[int]]:
    """Digit-pair covariate sets {d, C-1-d} grouped into C clusters.

    Each pair mixes one low/high and one even/odd class, so parity and
    threshold concept rules stay non-constant inside every covariate cluster.
    """
    if class_count % 2:
        raise ValueError("needs an even class count")
    pairs = [(d, class_count - 1 - d) for d in range(class_count // 2)]
    if not 2 <= C <= len(pairs):
        raise ValueError(f"C must be in [2, {len(pairs)}]")
    base, rem = divmod(len(pairs), C)
    groups, start = [], 0
    for k in range(C):
        size = base + (1 if k < rem else 0)
        chunk = pairs[start:start + size]
        groups.append(sorted(v for p in chunk for v in p))
        start += size
    return groups
