"""Per-user client: local training, gradient obfuscation, and LDP upload.

A client owns its private train triples and its own embedding.  Each round
it receives neighbors and the global snapshot, trains on a batch of its
triples, applies the user-embedding gradient locally, disguises which
items it really touched by attaching pseudo items, perturbs everything
bound for the server with clip-plus-Laplace noise, and uploads.  Raw
interaction values never leave the client.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import model, seeding
from .errors import ConfigError
from .messages import DownlinkMessage, UplinkMessage
from .model import AttentionParams, GradientBundle
from .optim import VectorOptimizer, check_optimizer

FLAG_PSEUDO_POOL_EMPTY = "pseudo-pool-empty"

MEAN_MODES = ("abs", "signed")


@dataclass(frozen=True)
class LdpConfig:
    """Clip threshold, noise multiplier, and pseudo-item rate for uploads."""

    delta: float = 0.5
    lam: float = 0.1
    pseudo_count: int = 2
    mean_mode: str = "abs"
    perturb_user_value: bool = False

    def __post_init__(self):
        if not self.delta > 0:
            raise ConfigError(f"clip threshold delta must be > 0, got {self.delta}")
        if self.lam < 0:
            raise ConfigError(f"noise multiplier lambda must be >= 0, got {self.lam}")
        if self.pseudo_count < 0:
            raise ConfigError(f"pseudo_count must be >= 0, got {self.pseudo_count}")
        if self.mean_mode not in MEAN_MODES:
            raise ConfigError(f"mean_mode must be one of {MEAN_MODES}")


@dataclass
class TrainSettings:
    """Hyperparameters a client needs for its local step."""

    lr: float = 0.01
    l2: float = 0.01
    optimizer: str = "adam"

    def __post_init__(self):
        check_optimizer(self.optimizer)


@dataclass
class ClientState:
    """One user's private state across rounds."""

    user_id: int
    item_ids: np.ndarray            # private train items
    values: np.ndarray              # private train values
    e_user: np.ndarray              # personal embedding, updated locally
    n_items: int                    # catalog size (for pseudo sampling)
    master_seed: int
    settings: TrainSettings = field(default_factory=TrainSettings)

    # Refreshed from the downlink each round.
    neighbor_ids: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    neighbor_emb: np.ndarray | None = None
    item_table: np.ndarray | None = None
    params: AttentionParams | None = None
    item_params: AttentionParams | None = None
    round_idx: int = 0

    _opt: VectorOptimizer | None = field(default=None, repr=False)

    @property
    def num_interactions(self) -> int:
        return len(self.item_ids)

    def rng_for_round(self, round_idx: int) -> np.random.Generator:
        return seeding.client_round_stream(self.master_seed, self.user_id, round_idx)

    def receive(self, msg: DownlinkMessage) -> None:
        """Install a downlink: neighbor cache and global snapshot."""
        self.neighbor_ids = msg.neighbor_ids
        self.neighbor_emb = msg.neighbor_emb if len(msg.neighbor_ids) else None
        self.item_table = msg.item_table
        self.params = msg.params
        self.item_params = msg.item_params
        self.round_idx = msg.round_idx

    def optimizer(self) -> VectorOptimizer:
        if self._opt is None:
            self._opt = VectorOptimizer(self.settings.optimizer)
        return self._opt


def local_train_step(state: ClientState, batch_size: int,
                     rng: np.random.Generator | None = None
                     ) -> tuple[float, GradientBundle] | None:
    """One local step: sample a batch, forward/backward, update e_user.

    Returns (loss, gradients) with the user-embedding gradient already
    consumed locally, or None when the client has no train data and must
    skip the round.
    """
    if state.num_interactions == 0:
        return None
    if state.item_table is None or state.params is None:
        raise ConfigError("client has no global snapshot; deliver a downlink first")
    rng = rng if rng is not None else state.rng_for_round(state.round_idx)

    n = state.num_interactions
    take = min(batch_size, n)
    pick = rng.choice(n, size=take, replace=False) if take < n else np.arange(n)
    batch_items = state.item_ids[pick]
    batch_values = state.values[pick]

    cache = model.forward(
        state.e_user, batch_items, state.item_table[batch_items], batch_values,
        state.params, neighbor_emb=state.neighbor_emb,
        item_params=state.item_params)
    grads = model.backward(cache)

    st = state.settings
    state.optimizer().step(state.e_user, grads.d_user, st.lr, st.l2)
    return cache.loss, grads


def obfuscate(grads: GradientBundle, state: ClientState, cfg: LdpConfig,
              rng: np.random.Generator) -> GradientBundle:
    """Attach pseudo items the user never interacted with.

    Pseudo rows carry zero signal; after :func:`perturb` they are Laplace
    noise drawn from the same distribution as the noise on real rows, so
    the server cannot tell real and pseudo items apart.  If the user has
    interacted with the whole catalog the bundle is returned unchanged
    with a warning flag.
    """
    if cfg.pseudo_count == 0:
        return grads
    interacted = np.asarray(state.item_ids, dtype=np.int64)
    pool = np.setdiff1d(np.arange(state.n_items, dtype=np.int64), interacted,
                        assume_unique=False)
    if len(pool) == 0:
        return GradientBundle(
            d_user=grads.d_user, item_ids=grads.item_ids, d_items=grads.d_items,
            d_W=grads.d_W, d_a=grads.d_a,
            d_W_item=grads.d_W_item, d_a_item=grads.d_a_item,
            sample_count=grads.sample_count,
            flags=grads.flags + (FLAG_PSEUDO_POOL_EMPTY,))
    want = min(cfg.pseudo_count * len(grads.item_ids), len(pool))
    pseudo = rng.choice(pool, size=want, replace=False)
    item_ids = np.concatenate([grads.item_ids, pseudo])
    d_items = np.vstack([grads.d_items, np.zeros((want, grads.d_items.shape[1]))])
    return GradientBundle(
        d_user=grads.d_user, item_ids=item_ids, d_items=d_items,
        d_W=grads.d_W, d_a=grads.d_a,
        d_W_item=grads.d_W_item, d_a_item=grads.d_a_item,
        sample_count=grads.sample_count, flags=grads.flags)


def _clip(tensor: np.ndarray, delta: float) -> np.ndarray:
    if math.isinf(delta):
        return tensor.copy()
    return np.clip(tensor, -delta, delta)


def perturb_tensor(tensor: np.ndarray, cfg: LdpConfig,
                   rng: np.random.Generator) -> np.ndarray:
    """Clip one tensor elementwise and add Laplace noise scaled to it.

    The noise scale is lambda times the mean magnitude of the clipped
    tensor (mean of absolute values by default; the literal signed mean is
    available via ``mean_mode="signed"``), so noise intensity tracks the
    gradient scale.  Zero tensors and lambda = 0 stay noise-free.
    """
    clipped = _clip(np.asarray(tensor, dtype=np.float64), cfg.delta)
    if cfg.lam == 0.0 or clipped.size == 0:
        return clipped
    if cfg.mean_mode == "abs":
        scale = cfg.lam * float(np.mean(np.abs(clipped)))
    else:
        scale = cfg.lam * abs(float(np.mean(clipped)))
    if scale == 0.0:
        return clipped
    return clipped + rng.laplace(0.0, scale, size=clipped.shape)


def perturb(grads: GradientBundle, cfg: LdpConfig,
            rng: np.random.Generator) -> GradientBundle:
    """Apply clip-plus-Laplace to every tensor bound for the server.

    The item-gradient block is treated as one tensor so real and pseudo
    rows share a noise scale; the user-embedding gradient is untouched
    because it never leaves the client.
    """
    return GradientBundle(
        d_user=grads.d_user,
        item_ids=grads.item_ids,
        d_items=perturb_tensor(grads.d_items, cfg, rng),
        d_W=perturb_tensor(grads.d_W, cfg, rng),
        d_a=perturb_tensor(grads.d_a, cfg, rng),
        d_W_item=None if grads.d_W_item is None
        else perturb_tensor(grads.d_W_item, cfg, rng),
        d_a_item=None if grads.d_a_item is None
        else perturb_tensor(grads.d_a_item, cfg, rng),
        sample_count=grads.sample_count, flags=grads.flags)


def build_upload(state: ClientState, perturbed: GradientBundle | None,
                 loss: float, cfg: LdpConfig,
                 rng: np.random.Generator | None = None) -> UplinkMessage:
    """Assemble the outbound message; carries no raw interaction values.

    With ``perturbed=None`` (empty-train client) the message still reports
    the embedding value with zero weight and no item gradients.
    """
    e_up = state.e_user.copy()
    if cfg.perturb_user_value:
        if rng is None:
            raise ConfigError("user-value perturbation requires an rng")
        e_up = perturb_tensor(e_up, cfg, rng)
    d = len(state.e_user)
    if perturbed is None:
        dim_out = state.params.dim_out if state.params is not None else d
        return UplinkMessage(
            user_id=state.user_id, user_embedding=e_up,
            item_ids=np.empty(0, dtype=np.int64),
            item_grads=np.empty((0, d), dtype=np.float64),
            grad_W=np.zeros((dim_out, d)), grad_a=np.zeros(2 * dim_out),
            num_interactions=0, loss=0.0)
    return UplinkMessage(
        user_id=state.user_id, user_embedding=e_up,
        item_ids=perturbed.item_ids, item_grads=perturbed.d_items,
        grad_W=perturbed.d_W, grad_a=perturbed.d_a,
        grad_W_item=perturbed.d_W_item, grad_a_item=perturbed.d_a_item,
        num_interactions=state.num_interactions, loss=loss,
        flags=perturbed.flags)


def evaluation_representation(state: ClientState) -> np.ndarray:
    """User representation for scoring unseen items (evaluation only)."""
    items = state.item_table[state.item_ids] if state.num_interactions else None
    return model.user_representation(
        state.e_user, items, state.neighbor_emb, state.params,
        item_params=state.item_params)
