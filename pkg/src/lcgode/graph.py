"""Architecture graphs and the GCN encoder that turns them into one vector.

Node features are (in-degree, out-degree) normalized by the number of
effective edges; zeroize edges (label 0) are dropped everywhere.  Edge labels
reach the message passing as learnable per-label scalar weights on the
adjacency entries.

Layered MLP graphs can have millions of edges, so encoding works on the
coarsest *equitable partition* of the nodes: two nodes share a class when
they have the same degree features and the same number of out-edges of each
label into every class.  GCN rows are identical within a class at every
layer, so propagating on the class-level count matrix and pooling with class
multiplicities reproduces the full-graph result exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import autodiff as ad

KINDS = ("mlp", "cnn_cell")
NUM_LABELS = 4
OPERATION_LABELS = {"zeroize": 0, "conv_1x1": 1, "conv_3x3": 2, "avg_pool_3x3": 3}
POOLING_METHODS = ("mean", "max", "learnable")

# keeps padded rows out of the segment max
_PAD = -1e30


class GraphError(ValueError):
    pass


@dataclass(eq=False)
class ArchitectureGraph:
    """Labeled directed graph; edges stored as parallel integer arrays."""

    num_nodes: int
    src: np.ndarray
    dst: np.ndarray
    label: np.ndarray
    kind: str = "mlp"

    def __post_init__(self) -> None:
        self.num_nodes = int(self.num_nodes)
        self.src = np.asarray(self.src, dtype=np.int32).reshape(-1)
        self.dst = np.asarray(self.dst, dtype=np.int32).reshape(-1)
        self.label = np.asarray(self.label, dtype=np.int8).reshape(-1)
        self.validate()

    @classmethod
    def from_edges(cls, num_nodes: int, edges, kind: str = "mlp") -> ArchitectureGraph:
        arr = np.asarray(list(edges), dtype=np.int64).reshape(-1, 3)
        return cls(num_nodes, arr[:, 0], arr[:, 1], arr[:, 2], kind)

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise GraphError(f"unknown graph kind {self.kind!r}")
        if self.num_nodes < 1:
            raise GraphError("graph needs at least one node")
        if not (len(self.src) == len(self.dst) == len(self.label)):
            raise GraphError("edge arrays differ in length")
        if len(self.src):
            lo = min(self.src.min(), self.dst.min())
            hi = max(self.src.max(), self.dst.max())
            if lo < 0 or hi >= self.num_nodes:
                raise GraphError(f"edge endpoint out of range [0, {self.num_nodes})")
            keys = self.src.astype(np.int64) * self.num_nodes + self.dst
            if len(np.unique(keys)) != len(keys):
                raise GraphError("duplicate (src, dst) edge")
        if self.kind == "mlp" and np.any(self.label != 1):
            raise GraphError("mlp edges must all carry label 1")
        if self.kind == "cnn_cell" and np.any((self.label < 0) | (self.label >= NUM_LABELS)):
            raise GraphError("cnn_cell labels must lie in {0, 1, 2, 3}")

    @property
    def num_edges(self) -> int:
        return len(self.src)

    @property
    def edges(self) -> list[tuple[int, int, int]]:
        return list(zip(self.src.tolist(), self.dst.tolist(), self.label.tolist()))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ArchitectureGraph):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.num_nodes == other.num_nodes
            and np.array_equal(self.src, other.src)
            and np.array_equal(self.dst, other.dst)
            and np.array_equal(self.label, other.label)
        )

    def relabeled(self, perm) -> ArchitectureGraph:
        """Copy with node ``i`` renamed to ``perm[i]``."""
        perm = np.asarray(perm, dtype=np.int64)
        return ArchitectureGraph(self.num_nodes, perm[self.src], perm[self.dst], self.label, self.kind)

    def to_json(self) -> dict:
        edges = np.stack([self.src, self.dst, self.label.astype(np.int32)], axis=1)
        return {"kind": self.kind, "num_nodes": self.num_nodes, "edges": edges.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> ArchitectureGraph:
        return cls.from_edges(doc["num_nodes"], doc["edges"], doc["kind"])

    @cached_property
    def quotient(self) -> Quotient:
        return build_quotient(self)


@dataclass
class NodeFeatureMatrix:
    X: np.ndarray
    degenerate: bool = False


def _effective(graph: ArchitectureGraph):
    keep = graph.label != 0
    return graph.src[keep], graph.dst[keep], graph.label[keep]


def node_features(graph: ArchitectureGraph) -> NodeFeatureMatrix:
    src, dst, _ = _effective(graph)
    n_edges = len(src)
    if n_edges == 0:
        return NodeFeatureMatrix(np.zeros((graph.num_nodes, 2)), degenerate=True)
    indeg = np.bincount(dst, minlength=graph.num_nodes)
    outdeg = np.bincount(src, minlength=graph.num_nodes)
    return NodeFeatureMatrix(np.stack([indeg, outdeg], axis=1) / n_edges)


def _label_weights(edge_label_weights) -> np.ndarray:
    w = np.array(ad.value(edge_label_weights), dtype=np.float64)
    w[0] = 0.0
    return w


def normalize_adjacency(graph: ArchitectureGraph, params: GraphEncoderParams) -> np.ndarray:
    """Dense ``D^-1/2 (A + I) D^-1/2`` with ``D`` the row sums of ``A + I``."""
    w = _label_weights(params.edge_label_weights)
    a = np.eye(graph.num_nodes)
    a[graph.src, graph.dst] += w[graph.label]
    s = a.sum(axis=1) ** -0.5
    return s[:, None] * a * s[None, :]


def gcn_layer(X, a_norm, W, activation: bool = True):
    """``relu(a_norm @ X @ W)``; pass ``activation=False`` for the final layer."""
    z = ad.matmul(ad.matmul(a_norm, X), W)
    return ad.relu(z) if activation else z


def pool(Z, method: str, score_weights=None, multiplicity=None):
    """Reduce node rows of ``Z`` to one vector.

    ``multiplicity`` counts how many graph nodes each row stands for; ``None``
    means one node per row.
    """
    rows = ad.value(Z).shape[0]
    if rows == 0:
        raise GraphError("cannot pool an empty node set")
    m = np.ones(rows) if multiplicity is None else np.asarray(multiplicity, dtype=np.float64)
    if method == "mean":
        return ad.matmul(m / m.sum(), Z)
    if method == "max":
        return ad.amax(Z, axis=0)
    if method == "learnable":
        weights = ad.softmax(ad.add(ad.matmul(Z, score_weights), np.log(m)))
        return ad.matmul(weights, Z)
    raise GraphError(f"unknown pooling {method!r}")


@dataclass
class GraphEncoderParams:
    gcn_weights: list
    edge_label_weights: object
    score_weights: object
    pooling: str = "learnable"

    def arrays(self, prefix: str = "graph.") -> dict:
        out = {f"{prefix}gcn{i}": w for i, w in enumerate(self.gcn_weights)}
        out[f"{prefix}edge_w"] = self.edge_label_weights
        out[f"{prefix}score_w"] = self.score_weights
        return out

    @classmethod
    def from_arrays(cls, arrays, pooling: str, prefix: str = "graph.") -> GraphEncoderParams:
        n = sum(1 for k in arrays if k.startswith(f"{prefix}gcn"))
        return cls(
            [arrays[f"{prefix}gcn{i}"] for i in range(n)],
            arrays[f"{prefix}edge_w"],
            arrays[f"{prefix}score_w"],
            pooling,
        )


def init_graph_params(rng: np.random.Generator, widths=(16, 16), pooling: str = "learnable") -> GraphEncoderParams:
    if pooling not in POOLING_METHODS:
        raise GraphError(f"unknown pooling {pooling!r}")
    dims = (2, *widths)
    weights = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    edge_w = np.array([0.0, 1.0, 1.0, 1.0])
    score_w = rng.normal(0.0, 0.1, size=widths[-1])
    return GraphEncoderParams(weights, edge_w, score_w, pooling)


# ---------------------------------------------------------------------------
# equitable-partition quotient


@dataclass
class Quotient:
    """Class-level view of a graph.

    ``counts[l, C, K]`` is the number of label-``l+1`` out-edges a node of
    class ``C`` has into class ``K``.
    """

    features: np.ndarray
    counts: np.ndarray
    multiplicity: np.ndarray
    class_of: np.ndarray = field(repr=False)
    degenerate: bool = False

    @property
    def size(self) -> int:
        return len(self.multiplicity)


def _refine(colors: np.ndarray, src, dst, label, num_nodes: int) -> np.ndarray:
    while True:
        k = int(colors.max()) + 1
        key = src.astype(np.int64) * (3 * k) + (label.astype(np.int64) - 1) * k + colors[dst]
        uniq, cnt = np.unique(key, return_counts=True)
        owner = uniq // (3 * k)
        local = uniq % (3 * k)
        bounds = np.searchsorted(owner, np.arange(num_nodes + 1))
        lo, hi = bounds[:-1].tolist(), bounds[1:].tolist()
        local_l, cnt_l, col_l = local.tolist(), cnt.tolist(), colors.tolist()
        sigs = [
            (col_l[i], tuple(local_l[lo[i] : hi[i]]), tuple(cnt_l[lo[i] : hi[i]]))
            for i in range(num_nodes)
        ]
        table = {s: j for j, s in enumerate(sorted(set(sigs)))}
        new = np.array([table[s] for s in sigs], dtype=np.int64)
        if len(table) == k:
            return new
        colors = new


def build_quotient(graph: ArchitectureGraph) -> Quotient:
    src, dst, label = _effective(graph)
    feats = node_features(graph)
    n = graph.num_nodes
    indeg = np.bincount(dst, minlength=n)
    outdeg = np.bincount(src, minlength=n)
    _, colors = np.unique(np.stack([indeg, outdeg], axis=1), axis=0, return_inverse=True)
    colors = _refine(colors.reshape(-1).astype(np.int64), src, dst, label, n)
    k = int(colors.max()) + 1
    multiplicity = np.bincount(colors, minlength=k).astype(np.float64)
    counts = np.zeros((NUM_LABELS - 1, k, k))
    np.add.at(counts, (label.astype(np.int64) - 1, colors[src], colors[dst]), 1.0)
    counts /= multiplicity[None, :, None]
    first = np.zeros(k, dtype=np.int64)
    first[colors[::-1]] = np.arange(n)[::-1]
    return Quotient(feats.X[first], counts, multiplicity, colors, feats.degenerate)


# ---------------------------------------------------------------------------
# batched encoder


def encode_quotients(quotients: list[Quotient], params: GraphEncoderParams):
    """Embed a batch of graphs; returns a ``(len(quotients), width)`` array or Var."""
    sizes = [q.size for q in quotients]
    total = int(np.sum(sizes))
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    counts = np.zeros((NUM_LABELS - 1, total, total))
    feats = np.zeros((total, 2))
    for q, o in zip(quotients, offsets[:-1]):
        counts[:, o : o + q.size, o : o + q.size] = q.counts
        feats[o : o + q.size] = q.features

    # A + I on the class level, then symmetric degree scaling by out-degree
    mask = np.array([0.0, 1.0, 1.0, 1.0])
    w = ad.getitem(ad.mul(params.edge_label_weights, mask), slice(1, None))
    adj = ad.reshape(ad.matmul(w, counts.reshape(NUM_LABELS - 1, -1)), (total, total))
    adj = ad.add(adj, np.eye(total))
    s = ad.power(ad.sum(adj, axis=1), -0.5)
    a_norm = ad.mul(ad.mul(ad.reshape(s, (total, 1)), adj), ad.reshape(s, (1, total)))

    z = feats
    layers = params.gcn_weights
    for i, W in enumerate(layers):
        z = gcn_layer(z, a_norm, W, activation=i < len(layers) - 1)

    mult = np.concatenate([q.multiplicity for q in quotients])
    member = np.zeros((len(quotients), total))
    for b, (lo, hi) in enumerate(zip(offsets[:-1], offsets[1:])):
        member[b, lo:hi] = 1.0
    if params.pooling == "mean":
        weights = member * mult[None, :]
        return ad.matmul(weights / weights.sum(axis=1, keepdims=True), z)
    if params.pooling == "max":
        kmax = max(sizes)
        index = np.zeros((len(quotients), kmax), dtype=np.int64)
        pad = np.zeros((len(quotients), kmax, 1))
        for b, (lo, size) in enumerate(zip(offsets[:-1], sizes)):
            index[b, :size] = np.arange(lo, lo + size)
            pad[b, size:] = _PAD
        return ad.amax(ad.add(ad.getitem(z, index), pad), axis=1)
    if params.pooling == "learnable":
        scores = ad.add(ad.matmul(z, params.score_weights), np.log(mult))
        peak = np.array([ad.value(scores)[lo:hi].max() for lo, hi in zip(offsets[:-1], offsets[1:])])
        # shift by a constant per graph; softmax is invariant to it
        e = ad.exp(ad.sub(scores, member.T @ peak))
        num = ad.matmul(member, ad.mul(ad.reshape(e, (total, 1)), z))
        den = ad.reshape(ad.matmul(member, e), (len(quotients), 1))
        return ad.div(num, den)
    raise GraphError(f"unknown pooling {params.pooling!r}")


def encode_graphs(graphs: list[ArchitectureGraph], params: GraphEncoderParams):
    return encode_quotients([g.quotient for g in graphs], params)


def encode_architecture(graph: ArchitectureGraph, params: GraphEncoderParams):
    """Graph embedding ``z_G`` for one architecture."""
    return ad.getitem(encode_graphs([graph], params), 0)
