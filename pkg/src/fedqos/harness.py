"""Deterministic round orchestration over a simulated transport.

One round is a full pass over all clients, processed in cohorts of
``config.batch`` clients.  For each cohort the server broadcasts the
current globals plus each member's neighbors, cohort members train and
upload perturbed gradients, and the server aggregates and steps the
global model.  Neighbor assignments refresh between rounds.  Clients and
server exchange data exclusively through the transport as encoded bytes,
so neither side can reach the other's live state.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import data as qdata
from . import messages, metrics, model, seeding
from .client import ClientState, TrainSettings, build_upload, local_train_step, obfuscate, perturb
from .config import ExperimentConfig
from .data import ClientData, InteractionSet, QosMatrix
from .errors import ConfigError, NumericOverflowError
from .model import EmbeddingTable
from .server import (
    NeighborAssignment,
    ServerState,
    aggregate_round,
    empty_assignment,
    select_top_k,
    write_checkpoint,
)

PAD_ID = -1  # padding for neighbor rows shorter than k


@dataclass
class SimTransport:
    """Byte-level message queues with delivery accounting."""

    up_queue: dict[int, bytes] = field(default_factory=dict)
    down_queue: dict[int, tuple[bytes, ...]] = field(default_factory=dict)
    up_bytes: int = 0
    down_bytes: int = 0
    up_messages: int = 0
    down_messages: int = 0

    def send_up(self, user_id: int, payload: bytes) -> None:
        self.up_queue[user_id] = payload
        self.up_bytes += len(payload)
        self.up_messages += 1

    def drain_up(self) -> list[tuple[int, bytes]]:
        """Deliver all pending uplinks in ascending user order."""
        out = sorted(self.up_queue.items())
        self.up_queue.clear()
        return out

    def send_down(self, user_id: int, parts: tuple[bytes, ...]) -> None:
        self.down_queue[user_id] = parts
        self.down_bytes += sum(len(p) for p in parts)
        self.down_messages += 1

    def take_down(self, user_id: int) -> tuple[bytes, ...]:
        return self.down_queue.pop(user_id)


@dataclass(frozen=True)
class RoundRecord:
    round_idx: int
    train_loss: float   # contribution-weighted global loss over the round
    valid_rmse: float
    valid_mae: float


@dataclass
class RunReport:
    """Per-round trace plus final held-out metrics for one run."""

    records: list[RoundRecord]
    test_rmse: float
    test_mae: float
    best_round: int
    best_valid_rmse: float
    baseline_mean_rmse: float
    baseline_mean_mae: float
    config_hash: str
    seed: int

    def to_dict(self) -> dict:
        return {
            "rounds": [
                {"round": r.round_idx, "train_loss": r.train_loss,
                 "valid_rmse": r.valid_rmse, "valid_mae": r.valid_mae}
                for r in self.records],
            "final": {
                "test_rmse": self.test_rmse, "test_mae": self.test_mae,
                "best_round": self.best_round,
                "best_valid_rmse": self.best_valid_rmse,
                "baseline_mean_rmse": self.baseline_mean_rmse,
                "baseline_mean_mae": self.baseline_mean_mae,
                "config_hash": self.config_hash, "seed": self.seed},
        }


def co_interaction_neighbors(partition: list[ClientData], n_users: int,
                             k: int) -> tuple[np.ndarray, np.ndarray]:
    """Neighbor ids by shared train items, capped at k by co-count.

    Returns (ids, counts), both (n_users, k), padded with -1 / 0 where a
    user has fewer than k co-interacting peers.  Ties break by ascending
    user id.
    """
    if not partition:
        raise ConfigError("empty partition")
    n_items = 1 + max((int(c.item_ids.max()) for c in partition if len(c.item_ids)),
                      default=0)
    incidence = np.zeros((n_users, n_items), dtype=np.float64)
    for c in partition:
        incidence[c.user_id, c.item_ids] = 1.0
    co_counts = incidence @ incidence.T
    np.fill_diagonal(co_counts, 0.0)

    ids = np.full((n_users, k), PAD_ID, dtype=np.int64)
    counts = np.zeros((n_users, k), dtype=np.float64)
    cand = np.arange(n_users)
    for u in range(n_users):
        row = co_counts[u]
        order = np.lexsort((cand, -row))
        take = order[row[order] > 0][:k]
        ids[u, :len(take)] = take
        counts[u, :len(take)] = row[take]
    return ids, counts


class Simulation:
    """A wired experiment: clients, server, transport, neighbor policy."""

    def __init__(self, config: ExperimentConfig, matrix: QosMatrix | None = None):
        self.config = config
        sched = config.schedule
        if matrix is None:
            matrix = qdata.load_matrix(config.data_path,
                                       missing_mark=config.missing_mark)
        self.matrix = matrix
        n_users, n_items = matrix.n_users, matrix.n_items
        if sched.clients_per_round not in (None, n_users):
            raise ConfigError(
                "per-round client sampling is not supported: clients_per_round "
                f"must be {n_users} or unset, got {sched.clients_per_round}")
        if config.variant == "full" and not 1 <= config.k < n_users:
            raise ConfigError(
                f"variant 'full' needs 1 <= k < n_users={n_users}, got k={config.k}")

        spec = qdata.named_split(config.split, seed=config.seed)
        self.train, self.valid, self.test = qdata.split(
            matrix, spec, stratified=config.stratified_split)
        self.partition = qdata.partition_by_user(self.train)

        seed = config.seed
        user_init = model.init_table(
            n_users, config.dim, seeding.stream(seed, seeding.INIT_PARAMS, 0),
            std=config.init_std)
        item_init = model.init_table(
            n_items, config.dim, seeding.stream(seed, seeding.INIT_PARAMS, 1),
            std=config.init_std)
        params = model.init_params(
            config.dim, seeding.stream(seed, seeding.INIT_PARAMS, 2),
            std=config.init_std, leaky_slope=config.leaky_slope)
        item_params = None
        if config.separate_item_params:
            item_params = model.init_params(
                config.dim, seeding.stream(seed, seeding.INIT_PARAMS, 3),
                std=config.init_std, leaky_slope=config.leaky_slope)

        settings = TrainSettings(lr=config.lr, l2=config.l2,
                                 optimizer=config.optimizer)
        self.clients = [
            ClientState(
                user_id=c.user_id, item_ids=c.item_ids, values=c.values,
                e_user=user_init.data[c.user_id].copy(), n_items=n_items,
                master_seed=seed, settings=settings)
            for c in self.partition]

        server_k = config.k if config.variant != "wo" else 0
        self.server = ServerState(
            user_table=EmbeddingTable(user_init.data.copy()),
            item_table=EmbeddingTable(item_init.data.copy()),
            params=params, item_params=item_params,
            head_count=config.heads, k=server_k,
            lr=config.lr, l2=config.l2, optimizer=config.optimizer)

        self.transport = SimTransport()
        self.assignment: NeighborAssignment = empty_assignment(n_users, config.dim)
        self._co_ids: np.ndarray | None = None
        self._co_counts: np.ndarray | None = None
        if config.variant == "all":
            self._co_ids, self._co_counts = co_interaction_neighbors(
                self.partition, n_users, config.k)
        self.round_idx = 0

    # -- neighbor policy ------------------------------------------------

    def refresh_neighbors(self) -> None:
        """Recompute the neighbor assignment per the configured variant."""
        variant = self.config.variant
        if variant == "wo":
            self.assignment = empty_assignment(self.matrix.n_users, self.config.dim)
        elif variant == "full":
            self.assignment = self.server.neighbor_assignment()
        else:  # all: static ids, current embedding values
            table = self.server.user_table.data
            emb = np.where((self._co_ids >= 0)[:, :, None],
                           table[np.maximum(self._co_ids, 0)], 0.0)
            self.assignment = NeighborAssignment(
                ids=self._co_ids, scores=self._co_counts, embeddings=emb)

    # -- round execution -------------------------------------------------

    def _send_downlink(self, user_id: int, shared_blob: bytes) -> None:
        ids = self.assignment.ids[user_id]
        mask = ids != PAD_ID
        header = messages.encode_downlink_header(
            user_id, self.round_idx, ids[mask],
            self.assignment.scores[user_id][mask],
            self.assignment.embeddings[user_id][mask])
        self.transport.send_down(user_id, (header, shared_blob))

    def _client_turn(self, user_id: int) -> None:
        state = self.clients[user_id]
        state.receive(messages.decode_downlink(self.transport.take_down(user_id)))
        rng = state.rng_for_round(self.round_idx)
        if self.config.batch_means == "triples":
            local_batch = self.config.batch
        else:
            local_batch = max(state.num_interactions, 1)
        outcome = local_train_step(state, local_batch, rng)
        if outcome is None:
            msg = build_upload(state, None, 0.0, self.config.ldp, rng)
        else:
            loss, grads = outcome
            grads = obfuscate(grads, state, self.config.ldp, rng)
            grads = perturb(grads, self.config.ldp, rng)
            msg = build_upload(state, grads, loss, self.config.ldp, rng)
        self.transport.send_up(user_id, messages.encode_uplink(msg))

    def run_round(self) -> float:
        """Advance every client once and return the round's global loss."""
        self.round_idx += 1
        cfg = self.config
        n_users = self.matrix.n_users
        if (self.round_idx - 1) % cfg.neighbor_refresh_every == 0:
            self.refresh_neighbors()

        order = seeding.stream(cfg.seed, seeding.COHORT_ORDER,
                               self.round_idx).permutation(n_users)
        cohort_size = cfg.batch if cfg.batch_means == "clients" else n_users
        round_loss = 0.0
        for start in range(0, n_users, cohort_size):
            cohort = order[start:start + cohort_size]
            shared = messages.encode_shared_snapshot(
                self.server.item_table.data, self.server.params,
                self.server.item_params)
            for uid in cohort:
                self._send_downlink(int(uid), shared)
            for uid in cohort:
                self._client_turn(int(uid))
            uploads = [messages.decode_uplink(payload)
                       for _, payload in self.transport.drain_up()]
            self.server.round_idx = self.round_idx
            result = aggregate_round(self.server, uploads)
            if not math.isfinite(result.global_loss):
                raise NumericOverflowError(
                    "global_loss", context=f"round {self.round_idx}")
            round_loss += result.global_loss
        return round_loss

    # -- evaluation -------------------------------------------------------

    def _representations(self) -> np.ndarray:
        """Current evaluation-time representation for every user."""
        item_table = self.server.item_table.data
        reps = np.empty((self.matrix.n_users, self.config.dim))
        for state in self.clients:
            items = item_table[state.item_ids] if state.num_interactions else None
            ids = self.assignment.ids[state.user_id]
            mask = ids != PAD_ID
            neighbors = self.assignment.embeddings[state.user_id][mask] \
                if mask.any() else None
            reps[state.user_id] = model.user_representation(
                state.e_user, items, neighbors, self.server.params,
                item_params=self.server.item_params)
        return reps

    def evaluate(self, interactions: InteractionSet) -> tuple[float, float]:
        """(RMSE, MAE) of current model predictions on an interaction set."""
        reps = self._representations()
        preds = np.einsum("nd,nd->n",
                          reps[interactions.users],
                          self.server.item_table.data[interactions.items])
        return (metrics.rmse(preds, interactions.values),
                metrics.mae(preds, interactions.values))

    # -- snapshot / restore for best-round selection ----------------------

    def snapshot(self) -> dict:
        return {
            "user_table": self.server.user_table.data.copy(),
            "item_table": self.server.item_table.data.copy(),
            "W": self.server.params.W.copy(),
            "a": self.server.params.a.copy(),
            "W_item": None if self.server.item_params is None
            else self.server.item_params.W.copy(),
            "a_item": None if self.server.item_params is None
            else self.server.item_params.a.copy(),
            "client_emb": np.stack([c.e_user for c in self.clients]),
            "assignment": self.assignment,
        }

    def restore(self, snap: dict) -> None:
        self.server.user_table.data[:] = snap["user_table"]
        self.server.item_table.data[:] = snap["item_table"]
        self.server.params.W[:] = snap["W"]
        self.server.params.a[:] = snap["a"]
        if self.server.item_params is not None:
            self.server.item_params.W[:] = snap["W_item"]
            self.server.item_params.a[:] = snap["a_item"]
        for state, emb in zip(self.clients, snap["client_emb"]):
            state.e_user = emb.copy()
        self.assignment = snap["assignment"]

    # -- full run ----------------------------------------------------------

    def run(self, out_dir=None) -> RunReport:
        cfg = self.config
        sched = cfg.schedule
        records: list[RoundRecord] = []
        best = (math.inf, 0, None)  # valid rmse, round, snapshot

        for _ in range(sched.total_rounds):
            loss = self.run_round()
            valid_rmse, valid_mae = self.evaluate(self.valid)
            records.append(RoundRecord(self.round_idx, loss, valid_rmse, valid_mae))
            if valid_rmse < best[0]:
                best = (valid_rmse, self.round_idx, self.snapshot())
            if cfg.checkpoint_every and out_dir is not None \
                    and self.round_idx % cfg.checkpoint_every == 0:
                write_checkpoint(self.server,
                                 f"{out_dir}/checkpoint_{self.round_idx:04d}.bin")
            if sched.patience and self.round_idx - best[1] >= sched.patience:
                break

        if best[2] is not None:
            self.restore(best[2])
        test_rmse, test_mae = self.evaluate(self.test)

        train_mean = float(np.mean(self.train.values))
        base_rmse = metrics.rmse(np.full(len(self.test), train_mean),
                                 self.test.values)
        base_mae = metrics.mae(np.full(len(self.test), train_mean),
                               self.test.values)
        return RunReport(
            records=records, test_rmse=test_rmse, test_mae=test_mae,
            best_round=best[1], best_valid_rmse=best[0],
            baseline_mean_rmse=base_rmse, baseline_mean_mae=base_mae,
            config_hash=cfg.hash(), seed=cfg.seed)


def run(config: ExperimentConfig, matrix: QosMatrix | None = None,
        out_dir=None) -> RunReport:
    """Execute one configured experiment end to end."""
    return Simulation(config, matrix=matrix).run(out_dir=out_dir)
