"""Per-emotion speaker similarity graphs, Louvain communities, and modularity.

A graph node is one (speaker, corpus) pair, its vector the mean of that
speaker's train-split style embeddings for the emotion. Edges keep cosine
similarities strictly above the threshold tau. Modularity is weighted:

    Q = (1/2m) * sum_ij [A_ij - k_i * k_j / 2m] * delta(c_i, c_j)

with the sum over ordered node pairs, A_ij the edge weight, k_i the weighted
degree, and m the total edge weight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embstore import EMOTIONS
from .errors import DomainError, InsufficientDataError

WEIGHT_EPS = 1e-9  # numerical slack above 1.0 for stored cosine weights
_GAIN_TOL = 1e-12  # minimum modularity gain that counts as an improvement


def cosine(u, v) -> float:
    """Cosine similarity of two equal-length vectors; rejects zero vectors."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DomainError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DomainError("cosine undefined for zero-norm vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


@dataclass
class SpeakerGraph:
    """Weighted undirected speaker graph for one emotion (or joint, emotion=None)."""

    emotion: str | None
    node_ids: list[tuple[str, str]]       # (speaker_id, corpus_id), sorted by (corpus, speaker)
    vectors: np.ndarray                   # (n, d_s) style means aligned with node_ids
    edges: list[tuple[int, int, float]]   # (i, j, weight), i < j, weight in (tau, 1 + eps]
    tau: float

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    def degrees(self) -> np.ndarray:
        k = np.zeros(self.n_nodes)
        for i, j, w in self.edges:
            k[i] += w
            k[j] += w
        return k

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n_nodes, self.n_nodes))
        for i, j, w in self.edges:
            a[i, j] = w
            a[j, i] = w
        return a

    def total_weight(self) -> float:
        return float(sum(w for _, _, w in self.edges))


@dataclass
class Partition:
    """Community assignment over graph nodes, indices contiguous from 0."""

    assignment: dict[tuple[str, str], int]
    n_communities: int

    @classmethod
    def from_labels(cls, node_ids, labels) -> "Partition":
        """Build a partition, relabeling communities by first appearance."""
        relabel: dict[int, int] = {}
        assignment = {}
        for node, lab in zip(node_ids, labels):
            if lab not in relabel:
                relabel[lab] = len(relabel)
            assignment[node] = relabel[lab]
        return cls(assignment, len(relabel))

    @classmethod
    def singleton(cls, node_ids) -> "Partition":
        return cls({node: i for i, node in enumerate(node_ids)}, len(node_ids))

    def communities(self) -> list[list[tuple[str, str]]]:
        out: list[list[tuple[str, str]]] = [[] for _ in range(self.n_communities)]
        for node, c in self.assignment.items():
            out[c].append(node)
        return out


@dataclass
class ModularityReport:
    emotion: str | None
    n_communities: int
    Q: float


def build_graph(records, emotion: str | None, tau: float,
                corpora: list[str] | None = None) -> SpeakerGraph:
    """Build the similarity graph from train-split speaker embeddings.

    ``emotion=None`` builds the emotion-agnostic graph over per-speaker means
    across all emotions. ``corpora`` optionally restricts node membership.
    """
    if not 0.0 <= tau < 1.0:
        raise DomainError(f"tau must lie in [0, 1), got {tau}")
    sums: dict[tuple[str, str], np.ndarray] = {}
    ns: dict[tuple[str, str], int] = {}
    for rec in records:
        if rec.kind != "speaker" or rec.split != "train":
            continue
        if emotion is not None and rec.emotion != emotion:
            continue
        if corpora is not None and rec.corpus_id not in corpora:
            continue
        key = (rec.speaker_id, rec.corpus_id)
        if key in sums:
            sums[key] = sums[key] + rec.vector
            ns[key] += 1
        else:
            sums[key] = rec.vector.copy()
            ns[key] = 1
    if len(sums) < 2:
        raise InsufficientDataError(
            f"fewer than 2 speakers with train style embeddings for emotion {emotion!r}"
        )
    node_ids = sorted(sums, key=lambda k: (k[1], k[0]))
    vectors = np.stack([sums[k] / ns[k] for k in node_ids])

    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms == 0.0):
        raise DomainError("zero-norm speaker mean vector")
    unit = vectors / norms[:, None]
    sims = np.clip(unit @ unit.T, -1.0, 1.0)
    edges = []
    n = len(node_ids)
    for i in range(n):
        for j in range(i + 1, n):
            w = float(sims[i, j])
            if w > tau:
                edges.append((i, j, w))
    return SpeakerGraph(emotion=emotion, node_ids=node_ids, vectors=vectors,
                        edges=edges, tau=tau)


def modularity(graph: SpeakerGraph, partition: Partition,
               unit_weights: bool = False) -> float:
    """Weighted modularity of a partition; ``unit_weights`` ignores edge weights."""
    if set(partition.assignment) != set(graph.node_ids):
        raise DomainError("partition does not cover exactly the graph's nodes")
    if not graph.edges:
        raise DomainError("modularity undefined for an edgeless graph (m = 0)")
    labels = np.array([partition.assignment[node] for node in graph.node_ids])
    k = np.zeros(graph.n_nodes)
    m = 0.0
    within = np.zeros(partition.n_communities)
    for i, j, w in graph.edges:
        if unit_weights:
            w = 1.0
        k[i] += w
        k[j] += w
        m += w
        if labels[i] == labels[j]:
            within[labels[i]] += w
    s_tot = np.zeros(partition.n_communities)
    np.add.at(s_tot, labels, k)
    return float(np.sum(within / m - (s_tot / (2.0 * m)) ** 2))


class _WorkGraph:
    """Mutable aggregated graph used inside Louvain.

    Self-loop weights count once in the degree and once in the ordered-pair
    modularity sum, which keeps Q invariant under aggregation.
    """

    def __init__(self, n, adj, loops):
        self.n = n
        self.adj = adj       # list of dicts: neighbor -> weight (no self entries)
        self.loops = loops   # self-loop weight per node
        self.k = np.array([sum(a.values()) for a in adj]) + loops
        self.two_m = float(self.k.sum())

    @classmethod
    def from_graph(cls, graph: SpeakerGraph, unit_weights: bool) -> "_WorkGraph":
        adj: list[dict[int, float]] = [dict() for _ in range(graph.n_nodes)]
        for i, j, w in graph.edges:
            if unit_weights:
                w = 1.0
            adj[i][j] = adj[i].get(j, 0.0) + w
            adj[j][i] = adj[j].get(i, 0.0) + w
        return cls(graph.n_nodes, adj, np.zeros(graph.n_nodes))

    def aggregate(self, labels: np.ndarray) -> tuple["_WorkGraph", int]:
        n_new = int(labels.max()) + 1
        adj: list[dict[int, float]] = [dict() for _ in range(n_new)]
        loops = np.zeros(n_new)
        for u in range(self.n):
            cu = labels[u]
            loops[cu] += self.loops[u]
            for v, w in self.adj[u].items():
                cv = labels[v]
                if cu == cv:
                    loops[cu] += w  # both directions visited -> internal weight doubled
                else:
                    adj[cu][cv] = adj[cu].get(cv, 0.0) + w
        return _WorkGraph(n_new, adj, loops), n_new


def _move_nodes(work: _WorkGraph, labels: np.ndarray, order: np.ndarray) -> bool:
    """Phase 1: greedy single-node moves. Returns True if any move happened."""
    m = work.two_m / 2.0
    s_tot = np.zeros(work.n)
    np.add.at(s_tot, labels, work.k)
    improved = False
    moved = True
    while moved:
        moved = False
        for u in order:
            cu = labels[u]
            ku = work.k[u]
            # weights from u to each neighboring community
            w_to: dict[int, float] = {}
            for v, w in work.adj[u].items():
                w_to[labels[v]] = w_to.get(labels[v], 0.0) + w
            s_tot[cu] -= ku
            # staying put is the baseline; scanning candidates in ascending
            # community order makes ties resolve to the lowest index
            best_c = cu
            best_gain = w_to.get(cu, 0.0) / m - ku * s_tot[cu] / (2.0 * m * m)
            for c in sorted(w_to):
                if c == cu:
                    continue
                gain = w_to[c] / m - ku * s_tot[c] / (2.0 * m * m)
                if gain > best_gain + _GAIN_TOL:
                    best_c, best_gain = c, gain
            s_tot[best_c] += ku
            if best_c != cu:
                labels[u] = best_c
                moved = True
                improved = True
    return improved


def _louvain_single(graph: SpeakerGraph, rng: np.random.Generator,
                    unit_weights: bool) -> Partition:
    work = _WorkGraph.from_graph(graph, unit_weights)
    # node_map[i] = current super-node of original node i
    node_map = np.arange(graph.n_nodes)
    while True:
        labels = np.arange(work.n)
        order = rng.permutation(work.n)
        improved = _move_nodes(work, labels, order)
        if not improved:
            break
        # compact labels before aggregating
        _, compact = np.unique(labels, return_inverse=True)
        node_map = compact[node_map]
        work, n_new = work.aggregate(compact)
        if n_new == 1:
            break
    return Partition.from_labels(graph.node_ids, node_map)


def louvain(graph: SpeakerGraph, seed: int, unit_weights: bool = False,
            restarts: int = 16) -> Partition:
    """Two-phase greedy modularity maximization over the weighted graph.

    Runs ``restarts`` greedy passes whose node visit orders are all shuffled
    from ``seed`` and keeps the highest-modularity partition (first found on
    ties). Among equal-gain moves the lowest community index wins; nodes
    without edges stay singleton. The result never has lower modularity than
    the singleton partition.
    """
    if not graph.edges:
        raise DomainError("louvain requires at least one edge")
    best_partition = None
    best_q = -np.inf
    for r in range(max(1, restarts)):
        rng = np.random.default_rng(np.random.SeedSequence([seed, r]))
        partition = _louvain_single(graph, rng, unit_weights)
        q = modularity(graph, partition, unit_weights=unit_weights)
        if q > best_q + _GAIN_TOL:
            best_partition = partition
            best_q = q
    return best_partition


@dataclass
class ClusterOutcome:
    """Per-emotion clustering results plus notices for emotions that failed."""

    results: dict[str, tuple[SpeakerGraph, Partition, ModularityReport]]
    notices: list[str]


def cluster_all_emotions(records, tau: float, seed: int,
                         corpora: list[str] | None = None,
                         unit_weights: bool = False) -> ClusterOutcome:
    """Run build_graph + louvain + modularity for every emotion category.

    Emotions with insufficient data or no surviving edges are reported as
    notices instead of failing the whole run.
    """
    results = {}
    notices = []
    for idx, emotion in enumerate(EMOTIONS):
        try:
            graph = build_graph(records, emotion, tau, corpora=corpora)
        except InsufficientDataError as exc:
            notices.append(f"{emotion}: {exc}")
            continue
        if not graph.edges:
            notices.append(f"{emotion}: no edges above tau = {graph.tau}")
            continue
        partition = louvain(graph, seed + idx, unit_weights=unit_weights)
        q = modularity(graph, partition, unit_weights=unit_weights)
        results[emotion] = (graph, partition,
                            ModularityReport(emotion, partition.n_communities, q))
    return ClusterOutcome(results, notices)


# ---------------------------------------------------------------------------
# Exports
# ---------------------------------------------------------------------------

def format_node(node_id: tuple[str, str]) -> str:
    speaker, corpus = node_id
    return f"{corpus}:{speaker}"


def export_edge_list(graph: SpeakerGraph) -> str:
    lines = []
    for i, j, w in graph.edges:
        lines.append(f"{format_node(graph.node_ids[i])}\t"
                     f"{format_node(graph.node_ids[j])}\t{w!r}")
    return "\n".join(lines) + ("\n" if lines else "")


def export_community_csv(partition: Partition) -> str:
    lines = ["node_id,community"]
    for node in sorted(partition.assignment, key=lambda k: (k[1], k[0])):
        lines.append(f"{format_node(node)},{partition.assignment[node]}")
    return "\n".join(lines) + "\n"


def export_dot(graph: SpeakerGraph, partition: Partition | None = None) -> str:
    """DOT export for external rendering of the speaker graphs.

    Node shape encodes corpus membership (circle for the first corpus in
    sorted order, box otherwise); the community attribute carries cluster
    membership for the renderer's coloring.
    """
    name = graph.emotion or "global"
    corpora = sorted({corpus for _, corpus in graph.node_ids})
    lines = [f'graph "{name}" {{']
    for node in graph.node_ids:
        attrs = []
        if partition is not None:
            attrs.append(f"community={partition.assignment[node]}")
        shape = "circle" if node[1] == corpora[0] else "box"
        attrs.append(f"shape={shape}")
        lines.append(f'  "{format_node(node)}" [{", ".join(attrs)}];')
    for i, j, w in graph.edges:
        lines.append(f'  "{format_node(graph.node_ids[i])}" -- '
                     f'"{format_node(graph.node_ids[j])}" [weight={w:.6f}];')
    lines.append("}")
    return "\n".join(lines) + "\n"
