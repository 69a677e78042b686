"""Coordinator: neighbor similarity, top-k assignment, global aggregation.

The server never sees raw interactions.  It ranks users by multi-head
attention over their uploaded embeddings, hands each client its top-k
neighbors, merges the uploaded (perturbed) gradients with weights
proportional to each client's interaction count, and steps the global
item table and attention parameters.
"""

import logging
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    DataFormatError,
    DegenerateInputError,
    NumericOverflowError,
)
from .messages import UplinkMessage
from .model import AttentionParams, EmbeddingTable, leaky_relu
from .optim import TableOptimizer, VectorOptimizer, check_optimizer

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NeighborAssignment:
    """Per-user neighbor lists: ids, similarity scores, embedding snapshots.

    Rows are sorted by descending score with ties broken by ascending user
    id; a user never appears in its own row.
    """

    ids: np.ndarray         # (n_users, k) int64
    scores: np.ndarray      # (n_users, k) float64
    embeddings: np.ndarray  # (n_users, k, d)

    @property
    def k(self) -> int:
        return self.ids.shape[1]

    def row(self, user_id: int) -> list[tuple[int, np.ndarray, float]]:
        return [(int(j), self.embeddings[user_id, pos], float(s))
                for pos, (j, s) in enumerate(zip(self.ids[user_id],
                                                 self.scores[user_id]))]


def empty_assignment(n_users: int, dim: int) -> NeighborAssignment:
    """No-neighbor wiring used by the ablation without the neighbor channel."""
    return NeighborAssignment(
        ids=np.empty((n_users, 0), dtype=np.int64),
        scores=np.empty((n_users, 0), dtype=np.float64),
        embeddings=np.empty((n_users, 0, dim), dtype=np.float64))


def split_heads(params: AttentionParams, head_count: int) -> list[AttentionParams]:
    """Slice the global attention parameters into independent head views.

    Head h scores with a contiguous block of W's output rows and the
    matching slices of the score vector, so heads share no coordinates and
    evolve with the trained parameters.
    """
    if head_count < 1:
        raise ConfigError(f"head count must be >= 1, got {head_count}")
    if head_count > params.dim_out:
        raise ConfigError(
            f"head count {head_count} exceeds projection dim {params.dim_out}")
    bounds = np.array_split(np.arange(params.dim_out), head_count)
    heads = []
    for rows in bounds:
        heads.append(AttentionParams(
            W=params.W[rows, :],
            a=np.concatenate([params.a_center[rows], params.a_peer[rows]]),
            leaky_slope=params.leaky_slope))
    return heads


def similarity_matrix(user_table: np.ndarray,
                      head_params: list[AttentionParams]) -> np.ndarray:
    """Pairwise user similarity: per-head attention rows, averaged over heads.

    Entry (i, j) is the mean over heads of the row-softmax attention weight
    of user j in user i's candidate set (all users except i).  The diagonal
    is NaN: self-similarity is excluded by construction.
    """
    table = np.asarray(user_table, dtype=np.float64)
    n = table.shape[0]
    if n < 2:
        raise DegenerateInputError(f"similarity needs >= 2 users, got {n}")
    if not head_params:
        raise ConfigError("similarity needs at least one attention head")

    total = np.zeros((n, n))
    off_diag = ~np.eye(n, dtype=bool)
    for hp in head_params:
        proj = table @ hp.W.T                       # (n, d_h)
        center = proj @ hp.a_center                 # (n,)
        peer = proj @ hp.a_peer                     # (n,)
        raw = leaky_relu(center[:, None] + peer[None, :], hp.leaky_slope)
        # Row softmax over the candidate set (self excluded).
        raw = np.where(off_diag, raw, -np.inf)
        raw -= raw.max(axis=1, keepdims=True)
        e = np.exp(raw)
        total += e / e.sum(axis=1, keepdims=True)
    scores = total / len(head_params)
    np.fill_diagonal(scores, np.nan)
    return scores


def select_top_k(scores: np.ndarray, k: int,
                 user_table: np.ndarray) -> NeighborAssignment:
    """Pick each row's k highest-scoring users, ties by ascending user id."""
    table = np.asarray(user_table, dtype=np.float64)
    n = scores.shape[0]
    if not 0 <= k < n:
        raise ConfigError(f"k must satisfy 0 <= k < n_users={n}, got {k}")
    if k == 0:
        return empty_assignment(n, table.shape[1])
    ids = np.empty((n, k), dtype=np.int64)
    picked_scores = np.empty((n, k), dtype=np.float64)
    cand_ids = np.arange(n)
    for i in range(n):
        row = scores[i].copy()
        row[i] = -np.inf  # self never selected
        order = np.lexsort((cand_ids, -row))
        ids[i] = order[:k]
        picked_scores[i] = row[ids[i]]
    return NeighborAssignment(ids=ids, scores=picked_scores,
                              embeddings=table[ids])


@dataclass
class ServerState:
    """Global model plus coordination bookkeeping."""

    user_table: EmbeddingTable
    item_table: EmbeddingTable
    params: AttentionParams
    item_params: AttentionParams | None
    head_count: int
    k: int
    lr: float
    l2: float
    optimizer: str = "adam"
    round_idx: int = 0
    round_log: list[tuple[int, float, float]] = field(default_factory=list)

    _item_opt: TableOptimizer | None = field(default=None, repr=False)
    _W_opt: VectorOptimizer | None = field(default=None, repr=False)
    _a_opt: VectorOptimizer | None = field(default=None, repr=False)
    _Wi_opt: VectorOptimizer | None = field(default=None, repr=False)
    _ai_opt: VectorOptimizer | None = field(default=None, repr=False)

    def __post_init__(self):
        check_optimizer(self.optimizer)
        n = self.user_table.rows
        if self.head_count < 1:
            raise ConfigError(f"head count must be >= 1, got {self.head_count}")
        if not 0 <= self.k < n:
            raise ConfigError(f"k must satisfy 0 <= k < n_users={n}, got {self.k}")
        self._item_opt = TableOptimizer(self.optimizer)
        self._W_opt = VectorOptimizer(self.optimizer)
        self._a_opt = VectorOptimizer(self.optimizer)
        self._Wi_opt = VectorOptimizer(self.optimizer)
        self._ai_opt = VectorOptimizer(self.optimizer)

    def head_views(self) -> list[AttentionParams]:
        return split_heads(self.params, self.head_count)

    def neighbor_assignment(self) -> NeighborAssignment:
        sim = similarity_matrix(self.user_table.data, self.head_views())
        return select_top_k(sim, self.k, self.user_table.data)


@dataclass(frozen=True)
class AggregateResult:
    global_loss: float
    weight_total: float
    touched_items: np.ndarray
    skipped: bool = False


def aggregate_round(state: ServerState, messages: list[UplinkMessage]) -> AggregateResult:
    """Merge one cohort of uploads and step the global parameters.

    Gradients are averaged with weights num_u / sum(num_u) over every
    message in the cohort (clients that never touched an item contribute
    zero for it), the global loss sum(num_u * loss_u^2) is logged, and
    uploaded embedding values replace the server's user-table rows.
    """
    if not messages:
        raise ConfigError("aggregate_round needs at least one message")
    total_weight = float(sum(m.num_interactions for m in messages))
    global_loss = float(sum(m.num_interactions * m.loss ** 2 for m in messages))

    for m in messages:
        state.user_table.data[m.user_id] = m.user_embedding

    if total_weight == 0.0:
        logger.warning("all uploads carry zero interactions; skipping update")
        state.round_log.append((state.round_idx, global_loss, time.time()))
        return AggregateResult(global_loss=0.0, weight_total=0.0,
                               touched_items=np.empty(0, np.int64), skipped=True)

    d = state.item_table.dim
    agg_W = np.zeros_like(state.params.W)
    agg_a = np.zeros_like(state.params.a)
    separate = state.item_params is not None
    agg_Wi = np.zeros_like(state.item_params.W) if separate else None
    agg_ai = np.zeros_like(state.item_params.a) if separate else None

    touched = np.unique(np.concatenate([m.item_ids for m in messages])) \
        if any(len(m.item_ids) for m in messages) else np.empty(0, np.int64)
    agg_items = np.zeros((len(touched), d))

    for m in messages:
        w = m.num_interactions / total_weight
        if w == 0.0:
            continue
        agg_W += w * m.grad_W
        agg_a += w * m.grad_a
        if separate and m.grad_W_item is not None:
            agg_Wi += w * m.grad_W_item
            agg_ai += w * m.grad_a_item
        if len(m.item_ids):
            rows = np.searchsorted(touched, m.item_ids)
            np.add.at(agg_items, rows, w * m.item_grads)

    for name, tensor in (("aggregated_item_grads", agg_items),
                         ("aggregated_grad_W", agg_W),
                         ("aggregated_grad_a", agg_a)):
        if not np.all(np.isfinite(tensor)):
            raise NumericOverflowError(name, context=f"round {state.round_idx}")

    state._item_opt.step_rows(state.item_table.data, touched, agg_items,
                              state.lr, state.l2)
    state._W_opt.step(state.params.W, agg_W, state.lr, state.l2)
    state._a_opt.step(state.params.a, agg_a, state.lr, state.l2)
    if separate:
        state._Wi_opt.step(state.item_params.W, agg_Wi, state.lr, state.l2)
        state._ai_opt.step(state.item_params.a, agg_ai, state.lr, state.l2)

    state.round_log.append((state.round_idx, global_loss, time.time()))
    return AggregateResult(global_loss=global_loss, weight_total=total_weight,
                           touched_items=touched)


def write_round_log(state: ServerState, path) -> None:
    """Line-delimited (round, global_loss, wall_time) records."""
    with open(path, "w", encoding="ascii") as fh:
        for round_idx, loss, wall in state.round_log:
            fh.write(f"{round_idx}\t{repr(loss)}\t{repr(wall)}\n")


# Checkpoints: flat float64 arrays with a shape header, deterministic bytes.
_CKPT_MAGIC = b"FQCK"


def write_checkpoint(state: ServerState, path) -> None:
    arrays = {
        "user_table": state.user_table.data,
        "item_table": state.item_table.data,
        "W": state.params.W,
        "a": state.params.a,
    }
    if state.item_params is not None:
        arrays["W_item"] = state.item_params.W
        arrays["a_item"] = state.item_params.a
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<qd", state.round_idx, state.params.leaky_slope))
        fh.write(struct.pack("<B", len(arrays)))
        for name, arr in arrays.items():
            raw = name.encode("ascii")
            fh.write(struct.pack("<B", len(raw)) + raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=np.float64).tobytes())


def read_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CKPT_MAGIC:
        raise DataFormatError("not a checkpoint file")
    off = 4
    round_idx, leaky = struct.unpack_from("<qd", blob, off)
    off += 16
    (count,) = struct.unpack_from("<B", blob, off)
    off += 1
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<B", blob, off)
        off += 1
        name = blob[off:off + nlen].decode("ascii")
        off += nlen
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}q", blob, off)
        off += 8 * ndim
        n_values = int(np.prod(shape))
        arrays[name] = np.frombuffer(
            blob, dtype=np.float64, count=n_values, offset=off).reshape(shape).copy()
        off += 8 * n_values
    return {"round_idx": round_idx, "leaky_slope": leaky, "arrays": arrays}
