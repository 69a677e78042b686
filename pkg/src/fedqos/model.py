"""Embedding model core: attention kernels, aggregation, prediction, loss,
and analytic gradients.

A user's representation is rebuilt every step from three channels:

* self: the user's own embedding,
* items: an attention-weighted aggregate of the items it interacted with,
* neighbors: an attention-weighted aggregate of server-provided peer
  embeddings (treated as constants during backprop).

Attention scores follow the scored-concatenation form
``LeakyReLU(a . [W c || W x])``, softmax-normalized over the candidate
set with max-subtraction for stability.  The channel mixing weights are
produced by the same kernel applied to the three candidate vectors, so
everything downstream of the embeddings is differentiable and the
gradients below are exact.
"""

from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .errors import (
    ContractViolation,
    EmptyNeighborhoodError,
    NumericOverflowError,
    ShapeError,
)

DEFAULT_DIM = 200
DEFAULT_LEAKY_SLOPE = 0.2
DEFAULT_INIT_STD = 0.01


@dataclass
class EmbeddingTable:
    """Dense rows x dim embedding storage."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ShapeError(f"embedding table must be 2-D, got ndim={self.data.ndim}")
        if not np.all(np.isfinite(self.data)):
            raise NumericOverflowError("embedding_table")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def init_table(rows: int, dim: int, rng: np.random.Generator,
               std: float = DEFAULT_INIT_STD) -> EmbeddingTable:
    """Seeded Gaussian init, mean 0: keeps initial predictions near zero."""
    return EmbeddingTable(rng.normal(0.0, std, size=(rows, dim)))


@dataclass
class AttentionParams:
    """Learnable attention parameters: projection W and score vector a.

    ``a`` has length 2*d_out; its first half scores the projected center,
    the second half the projected candidate.
    """

    W: np.ndarray
    a: np.ndarray
    leaky_slope: float = DEFAULT_LEAKY_SLOPE

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.a = np.asarray(self.a, dtype=np.float64)
        if self.W.ndim != 2:
            raise ShapeError("W must be a matrix")
        if self.a.shape != (2 * self.W.shape[0],):
            raise ShapeError(
                f"a must have length {2 * self.W.shape[0]}, got {self.a.shape}")
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.a))):
            raise NumericOverflowError("attention_params")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ContractViolation(f"leaky slope must be in (0,1), got {self.leaky_slope}")

    @property
    def dim_out(self) -> int:
        return self.W.shape[0]

    @property
    def dim_in(self) -> int:
        return self.W.shape[1]

    @property
    def a_center(self) -> np.ndarray:
        return self.a[: self.dim_out]

    @property
    def a_peer(self) -> np.ndarray:
        return self.a[self.dim_out:]

    def copy(self) -> "AttentionParams":
        return AttentionParams(self.W.copy(), self.a.copy(), self.leaky_slope)


def init_params(dim: int, rng: np.random.Generator, std: float = DEFAULT_INIT_STD,
                dim_out: int | None = None,
                leaky_slope: float = DEFAULT_LEAKY_SLOPE) -> AttentionParams:
    d_out = dim if dim_out is None else dim_out
    return AttentionParams(
        W=rng.normal(0.0, std, size=(d_out, dim)),
        a=rng.normal(0.0, std, size=2 * d_out),
        leaky_slope=leaky_slope)


def leaky_relu(z: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z >= 0, z, slope * z)


def leaky_relu_grad(z: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z >= 0, 1.0, slope)


def stable_softmax(raw: np.ndarray) -> np.ndarray:
    """Softmax with max-subtraction; shift-invariant by construction."""
    shifted = raw - np.max(raw)
    e = np.exp(shifted)
    return e / e.sum()


@dataclass(frozen=True)
class AttentionScores:
    """Raw and normalized attention coefficients over a candidate set."""

    index: np.ndarray       # candidate ids, (n,)
    raw: np.ndarray         # pre-softmax scores, (n,)
    normalized: np.ndarray  # softmax weights, (n,), sums to 1

    @property
    def raw_map(self) -> dict[int, float]:
        return {int(j): float(v) for j, v in zip(self.index, self.raw)}

    @property
    def normalized_map(self) -> dict[int, float]:
        return {int(j): float(v) for j, v in zip(self.index, self.normalized)}


def _candidate_matrix(neighbors) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(neighbors, dtype=np.float64))
    return arr


def raw_attention(center: np.ndarray, candidates: np.ndarray,
                  params: AttentionParams) -> np.ndarray:
    """Pre-softmax scores LeakyReLU(a_center . Wc + a_peer . Wx_j)."""
    center = np.asarray(center, dtype=np.float64)
    if center.shape != (params.dim_in,):
        raise ShapeError(f"center has shape {center.shape}, expected ({params.dim_in},)")
    if candidates.shape[1] != params.dim_in:
        raise ShapeError(
            f"candidates have dim {candidates.shape[1]}, expected {params.dim_in}")
    c_score = params.a_center @ (params.W @ center)
    peer_scores = (candidates @ params.W.T) @ params.a_peer
    return leaky_relu(c_score + peer_scores, params.leaky_slope)


def attention_scores(center, neighbors, params: AttentionParams,
                     index=None) -> AttentionScores:
    """Score a candidate set against a center embedding and normalize.

    Raises :class:`EmptyNeighborhoodError` for an empty candidate set; the
    caller decides the fallback (skip the channel, or fail).
    """
    cand = _candidate_matrix(neighbors)
    if cand.size == 0 or cand.shape[0] == 0:
        raise EmptyNeighborhoodError("attention over an empty candidate set")
    raw = raw_attention(np.asarray(center, dtype=np.float64), cand, params)
    idx = np.arange(cand.shape[0], dtype=np.int64) if index is None \
        else np.asarray(index, dtype=np.int64)
    if idx.shape != (cand.shape[0],):
        raise ShapeError("index length must match candidate count")
    return AttentionScores(index=idx, raw=raw, normalized=stable_softmax(raw))


def aggregate(scores: AttentionScores, neighbors, params: AttentionParams) -> np.ndarray:
    """Convex combination of projected candidates: sum_j alpha_j (W x_j)."""
    cand = _candidate_matrix(neighbors)
    if cand.shape[0] != len(scores.normalized):
        raise ShapeError(
            f"{cand.shape[0]} candidates but {len(scores.normalized)} scores")
    return (cand @ params.W.T).T @ scores.normalized


def update_user_embedding(e_user, agg_items, agg_neighbors, weights) -> np.ndarray:
    """Mix the three channels with weights that must sum to one."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (3,):
        raise ShapeError(f"expected 3 weights, got shape {w.shape}")
    if abs(w.sum() - 1.0) > 1e-6:
        raise ContractViolation(f"channel weights sum to {w.sum()!r}, expected 1")
    vecs = [np.asarray(v, dtype=np.float64) for v in (e_user, agg_items, agg_neighbors)]
    if not (vecs[0].shape == vecs[1].shape == vecs[2].shape):
        raise ShapeError("channel vectors must share a shape")
    return w[0] * vecs[0] + w[1] * vecs[1] + w[2] * vecs[2]


def predict(e_user, e_item) -> float:
    """Predicted QoS value: inner product of user and item representations."""
    u = np.asarray(e_user, dtype=np.float64)
    i = np.asarray(e_item, dtype=np.float64)
    if u.shape != i.shape:
        raise ShapeError(f"user shape {u.shape} != item shape {i.shape}")
    return float(u @ i)


def local_loss(predicted, actual) -> float:
    """Client training loss; identical to the reported RMSE metric."""
    return metrics.rmse(predicted, actual)


@dataclass
class GradientBundle:
    """Gradients for every learnable tensor touched by one batch."""

    d_user: np.ndarray             # (d,)
    item_ids: np.ndarray           # (m,) int64
    d_items: np.ndarray            # (m, d), row i is the gradient for item_ids[i]
    d_W: np.ndarray
    d_a: np.ndarray
    d_W_item: np.ndarray | None = None  # only when item attention has its own params
    d_a_item: np.ndarray | None = None
    sample_count: int = 0
    flags: tuple[str, ...] = ()

    def validate_finite(self) -> None:
        for name in ("d_user", "d_items", "d_W", "d_a", "d_W_item", "d_a_item"):
            tensor = getattr(self, name)
            if tensor is not None and not np.all(np.isfinite(tensor)):
                raise NumericOverflowError(name, context="client gradient")


@dataclass
class ForwardCache:
    """Everything the backward pass needs from one forward evaluation."""

    e_user: np.ndarray
    item_ids: np.ndarray
    item_emb: np.ndarray           # (m, d)
    values: np.ndarray             # (m,)
    neighbor_emb: np.ndarray | None
    params: AttentionParams
    item_params: AttentionParams | None

    p_center: np.ndarray           # W @ e_user
    p_center_item: np.ndarray      # W_item @ e_user (same array when shared)
    q_items: np.ndarray            # (m, d_out)
    y_items: np.ndarray            # pre-activation item scores
    beta: np.ndarray               # item attention weights
    agg_items: np.ndarray
    q_neighbors: np.ndarray | None
    y_neighbors: np.ndarray | None
    alpha: np.ndarray | None
    agg_neighbors: np.ndarray | None
    candidates: np.ndarray         # (n_ch, d) channel candidate vectors
    q_candidates: np.ndarray
    y_theta: np.ndarray
    theta: np.ndarray              # channel weights, len 2 or 3
    theta_override: np.ndarray | None
    e_prime: np.ndarray
    predictions: np.ndarray
    residuals: np.ndarray          # actual - predicted
    loss: float

    @property
    def has_neighbors(self) -> bool:
        return self.neighbor_emb is not None

    @property
    def shared_item_params(self) -> bool:
        return self.item_params is None


def _score_components(center_proj: np.ndarray, cand: np.ndarray,
                      params: AttentionParams):
    """Projected candidates, raw scores, and softmax weights for one channel."""
    q = cand @ params.W.T
    y = params.a_center @ center_proj + q @ params.a_peer
    weights = stable_softmax(leaky_relu(y, params.leaky_slope))
    return q, y, weights


def forward(e_user, item_ids, item_emb, values, params: AttentionParams,
            neighbor_emb=None, item_params: AttentionParams | None = None,
            theta_override=None) -> ForwardCache:
    """Run the full per-client forward pass over one batch.

    ``neighbor_emb`` may be None (no-neighbor wiring): the neighbor channel
    is dropped and the mixing weights renormalize over {self, items}.
    ``theta_override`` replaces the attention-derived channel weights; it
    exists for diagnostics and closed-form gradient checks.
    """
    e_user = np.asarray(e_user, dtype=np.float64)
    item_emb = np.atleast_2d(np.asarray(item_emb, dtype=np.float64))
    values = np.asarray(values, dtype=np.float64)
    item_ids = np.asarray(item_ids, dtype=np.int64)
    if item_emb.shape[0] == 0:
        raise EmptyNeighborhoodError("forward pass needs at least one item")
    if item_emb.shape[0] != len(values) or len(values) != len(item_ids):
        raise ShapeError("item ids, embeddings, and values must align")

    ip = item_params if item_params is not None else params
    if params.dim_out != params.dim_in or ip.dim_out != ip.dim_in:
        raise ShapeError(
            "channel mixing requires square W (projection dim == embedding dim)")
    p_center = params.W @ e_user
    p_center_item = p_center if item_params is None else ip.W @ e_user

    q_items, y_items, beta = _score_components(p_center_item, item_emb, ip)
    agg_items = q_items.T @ beta

    if neighbor_emb is not None:
        neighbor_emb = np.atleast_2d(np.asarray(neighbor_emb, dtype=np.float64))
        if neighbor_emb.shape[0] == 0:
            neighbor_emb = None

    if neighbor_emb is not None:
        q_nb, y_nb, alpha = _score_components(p_center, neighbor_emb, params)
        agg_nb = q_nb.T @ alpha
        candidates = np.stack([e_user, agg_items, agg_nb])
    else:
        q_nb = y_nb = alpha = agg_nb = None
        candidates = np.stack([e_user, agg_items])

    q_cand, y_theta, theta = _score_components(p_center, candidates, params)
    if theta_override is not None:
        theta = np.asarray(theta_override, dtype=np.float64)
        if theta.shape != (candidates.shape[0],):
            raise ShapeError("theta override length must match channel count")

    e_prime = theta @ candidates
    predictions = item_emb @ e_prime
    residuals = values - predictions
    loss = float(np.sqrt(np.mean(residuals ** 2)))

    return ForwardCache(
        e_user=e_user, item_ids=item_ids, item_emb=item_emb, values=values,
        neighbor_emb=neighbor_emb, params=params, item_params=item_params,
        p_center=p_center, p_center_item=p_center_item,
        q_items=q_items, y_items=y_items, beta=beta, agg_items=agg_items,
        q_neighbors=q_nb, y_neighbors=y_nb, alpha=alpha, agg_neighbors=agg_nb,
        candidates=candidates, q_candidates=q_cand, y_theta=y_theta, theta=theta,
        theta_override=None if theta_override is None else theta,
        e_prime=e_prime, predictions=predictions, residuals=residuals, loss=loss)


def _softmax_backward(weights: np.ndarray, d_weights: np.ndarray) -> np.ndarray:
    return weights * (d_weights - weights @ d_weights)


def backward(cache: ForwardCache) -> GradientBundle:
    """Exact gradients of the RMSE loss for every learnable tensor.

    Neighbor embeddings are constants (no gradient is emitted for them),
    which keeps other users' parameters outside this client's update.  At
    zero loss the RMSE root is not differentiable; the stationary-point
    convention returns an all-zero bundle.
    """
    m = len(cache.values)
    d = cache.e_user.shape[0]
    params = cache.params
    ip = cache.item_params if cache.item_params is not None else params
    shared = cache.shared_item_params

    d_W = np.zeros_like(params.W)
    d_a = np.zeros_like(params.a)
    d_W_item = None if shared else np.zeros_like(ip.W)
    d_a_item = None if shared else np.zeros_like(ip.a)
    d_user = np.zeros(d)
    d_items = np.zeros_like(cache.item_emb)

    if cache.loss == 0.0:
        return GradientBundle(
            d_user=d_user, item_ids=cache.item_ids, d_items=d_items,
            d_W=d_W, d_a=d_a, d_W_item=d_W_item, d_a_item=d_a_item,
            sample_count=m)

    slope = params.leaky_slope
    # dL/d prediction_t = -residual_t / (m * loss)
    g = -cache.residuals / (m * cache.loss)

    # Prediction layer.
    d_items += np.outer(g, cache.e_prime)
    d_eprime = cache.item_emb.T @ g

    # Channel mixing e' = theta @ candidates.
    d_theta = cache.candidates @ d_eprime
    d_cand = np.outer(cache.theta, d_eprime)

    d_p_center = np.zeros_like(cache.p_center)
    d_p_center_item = np.zeros(ip.dim_out)

    if cache.theta_override is None:
        dz = _softmax_backward(cache.theta, d_theta) \
            * leaky_relu_grad(cache.y_theta, slope)
        d_a[: params.dim_out] += dz.sum() * cache.p_center
        d_a[params.dim_out:] += cache.q_candidates.T @ dz
        d_p_center += dz.sum() * params.a_center
        dq_cand = np.outer(dz, params.a_peer)
        d_W += dq_cand.T @ cache.candidates
        d_cand += dq_cand @ params.W
    # With an override theta is a constant: no score-path gradients.

    d_user += d_cand[0]
    d_agg_items = d_cand[1]

    # Neighbor channel (constants as inputs, but W/a still learn through it).
    if cache.has_neighbors:
        d_agg_nb = d_cand[2]
        d_alpha = cache.q_neighbors @ d_agg_nb
        dq_nb = np.outer(cache.alpha, d_agg_nb)
        dy = _softmax_backward(cache.alpha, d_alpha) \
            * leaky_relu_grad(cache.y_neighbors, slope)
        d_a[: params.dim_out] += dy.sum() * cache.p_center
        d_a[params.dim_out:] += cache.q_neighbors.T @ dy
        d_p_center += dy.sum() * params.a_center
        dq_nb += np.outer(dy, params.a_peer)
        d_W += dq_nb.T @ cache.neighbor_emb

    # Item channel: value path and score path both reach the item embeddings.
    d_beta = cache.q_items @ d_agg_items
    dq_items = np.outer(cache.beta, d_agg_items)
    dy_items = _softmax_backward(cache.beta, d_beta) \
        * leaky_relu_grad(cache.y_items, ip.leaky_slope)
    target_a = d_a if shared else d_a_item
    target_W = d_W if shared else d_W_item
    target_a[: ip.dim_out] += dy_items.sum() * cache.p_center_item
    target_a[ip.dim_out:] += cache.q_items.T @ dy_items
    d_p_center_item += dy_items.sum() * ip.a_center
    dq_items += np.outer(dy_items, ip.a_peer)
    target_W += dq_items.T @ cache.item_emb
    d_items += dq_items @ ip.W

    # Close the center projections p = W e_u.
    if shared:
        d_p = d_p_center + d_p_center_item
        d_W += np.outer(d_p, cache.e_user)
        d_user += params.W.T @ d_p
    else:
        d_W += np.outer(d_p_center, cache.e_user)
        d_user += params.W.T @ d_p_center
        d_W_item += np.outer(d_p_center_item, cache.e_user)
        d_user += ip.W.T @ d_p_center_item

    bundle = GradientBundle(
        d_user=d_user, item_ids=cache.item_ids, d_items=d_items,
        d_W=d_W, d_a=d_a, d_W_item=d_W_item, d_a_item=d_a_item,
        sample_count=m)
    bundle.validate_finite()
    return bundle


def user_representation(e_user, item_emb, neighbor_emb, params: AttentionParams,
                        item_params: AttentionParams | None = None) -> np.ndarray:
    """Evaluation-time user representation; tolerates missing channels.

    Channels with no members are dropped and the mixing attention runs over
    whatever remains; with no items and no neighbors the representation is
    the user embedding itself.
    """
    e_user = np.asarray(e_user, dtype=np.float64)
    ip = item_params if item_params is not None else params
    if params.dim_out != params.dim_in or ip.dim_out != ip.dim_in:
        raise ShapeError(
            "channel mixing requires square W (projection dim == embedding dim)")
    p_center = params.W @ e_user
    channels = [e_user]

    if item_emb is not None:
        item_emb = np.atleast_2d(np.asarray(item_emb, dtype=np.float64))
        if item_emb.shape[0] > 0:
            p_ci = p_center if item_params is None else ip.W @ e_user
            q, _, beta = _score_components(p_ci, item_emb, ip)
            channels.append(q.T @ beta)

    if neighbor_emb is not None:
        neighbor_emb = np.atleast_2d(np.asarray(neighbor_emb, dtype=np.float64))
        if neighbor_emb.shape[0] > 0:
            q, _, alpha = _score_components(p_center, neighbor_emb, params)
            channels.append(q.T @ alpha)

    if len(channels) == 1:
        return e_user.copy()
    candidates = np.stack(channels)
    _, _, theta = _score_components(p_center, candidates, params)
    return theta @ candidates
