"""Sequential robust training over a logical ring.

Each round walks the agreed ring order once.  An active benign node keeps a
bounded FIFO of the latest models multicast by its counterclockwise
neighbours, picks the stored model with the lowest loss on a fresh local
mini-batch, updates it with one SGD step on the same mini-batch, and
multicasts the result to its next ``S`` clockwise neighbours.  Byzantine
nodes emit attack output instead.  Everything is driven by explicit seeds,
so two runs with the same configuration are bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .attacks import AttackSpec, apply_attack
from .data import Dataset
from .errors import ConfigError, ProtocolError
from .history import HistoryRow, TrainHistory
from .models import LossTask, ModelVector, accuracy, evaluate_loss, sgd_step

# rng stream tags; every consumer derives default_rng([seed, tag, ...])
TAG_ORDER = 0xA0
TAG_BYZANTINE = 0xA1
TAG_BATCH = 0xA2
TAG_ATTACK = 0xA3

DEFAULT_BATCH_SIZE = 80


def default_lr(k: int) -> float:
    """Decaying schedule 0.03 / (1 + 0.03 k) with k the 1-indexed round."""
    return 0.03 / (1.0 + 0.03 * k)


def constant_lr(eta: float) -> Callable[[int], float]:
    return lambda k: eta


@dataclass(frozen=True)
class RingConfig:
    """Node census and connectivity for one ring."""

    n_nodes: int
    n_byzantine: int = 0
    n_dropout: int = 0
    connectivity: int = 1
    seed: int = 0
    byzantine_ids: frozenset[int] | None = None

    def __post_init__(self):
        if self.n_nodes < 1:
            raise ConfigError("n_nodes must be >= 1")
        if not 0 <= self.n_byzantine < self.n_nodes:
            raise ConfigError("need 0 <= b < N")
        if self.n_dropout < 0:
            raise ConfigError("n_dropout must be >= 0")
        if self.n_nodes > 1 and not 1 <= self.connectivity <= self.n_nodes - 1:
            raise ConfigError("need 1 <= S <= N-1")
        if self.byzantine_ids is not None:
            ids = frozenset(self.byzantine_ids)
            object.__setattr__(self, "byzantine_ids", ids)
            if len(ids) > self.n_byzantine:
                raise ConfigError("byzantine set larger than declared worst case b")
        if self.n_dropout > 0 and self.multicast_width > self.n_nodes - 1:
            raise ConfigError("b + d + 1 must not exceed N - 1 in dropout mode")

    @property
    def multicast_width(self) -> int:
        """How many clockwise neighbours receive each update."""
        if self.n_dropout > 0:
            return self.n_byzantine + self.n_dropout + 1
        return self.connectivity

    @property
    def storage_depth(self) -> int:
        """FIFO capacity at each node."""
        if self.n_dropout > 0:
            return self.n_byzantine + 1
        return self.connectivity


def agree_order(node_ids, seed: int) -> tuple[int, ...]:
    """Deterministic ring permutation every node derives from the common seed."""
    ids = list(node_ids)
    if not ids:
        raise ConfigError("node id list is empty")
    if len(set(ids)) != len(ids):
        raise ConfigError("node ids must be unique")
    order = sorted(ids)
    np.random.default_rng([int(seed), TAG_ORDER]).shuffle(order)
    return tuple(order)


class StoredEntry(NamedTuple):
    sender: int | None
    round: int
    model: ModelVector


class StoredModels:
    """Bounded FIFO of received models, newest first."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError("FIFO capacity must be >= 1")
        self.capacity = capacity
        self.entries: list[StoredEntry] = []

    def insert(self, sender: int | None, round_k: int, model: ModelVector) -> None:
        self.entries.insert(0, StoredEntry(sender, round_k, model))
        del self.entries[self.capacity:]

    def __len__(self) -> int:
        return len(self.entries)

    def senders(self) -> list[int | None]:
        return [e.sender for e in self.entries]


class Selection(NamedTuple):
    model: ModelVector
    sender: int | None
    candidate_losses: tuple[tuple[int | None, float], ...]


def basil_select(stored: StoredModels, task: LossTask, X, y) -> Selection:
    """Pick the stored model with the lowest loss on the evaluation batch.

    Non-finite models evaluate to +inf so the rule stays total; exact ties go
    to the newest entry (the FIFO is ordered newest first).
    """
    if len(stored) == 0:
        raise ProtocolError("model queue is empty")
    losses = []
    for entry in stored.entries:
        if not entry.model.is_finite():
            losses.append(math.inf)
        else:
            losses.append(evaluate_loss(entry.model, task, X, y))
    best = min(range(len(losses)), key=lambda i: (losses[i], i))
    chosen = stored.entries[best]
    audit = tuple((e.sender, l) for e, l in zip(stored.entries, losses))
    return Selection(chosen.model, chosen.sender, audit)


def sample_byzantine_ids(node_ids, count: int, seed: int) -> frozenset[int]:
    """Uniform placement without replacement, driven by the run seed."""
    rng = np.random.default_rng([int(seed), TAG_BYZANTINE])
    picked = rng.choice(np.asarray(sorted(node_ids)), size=count, replace=False)
    return frozenset(int(x) for x in picked)


class BasilRing:
    """Stateful driver for the ring protocol, including dropout handling."""

    def __init__(
        self,
        config: RingConfig,
        task: LossTask,
        dataset: Dataset,
        *,
        attack: AttackSpec | None = None,
        lr_schedule: Callable[[int], float] | None = None,
        batch_size: int | None = DEFAULT_BATCH_SIZE,
        test_set: tuple[np.ndarray, np.ndarray] | None = None,
        initial_model: ModelVector | None = None,
        initial_models: dict[int, ModelVector] | None = None,
        node_ids: list[int] | None = None,
        group: int | None = None,
        record_test_acc: bool = True,
        manifest: dict | None = None,
    ):
        self.config = config
        self.task = task
        self.dataset = dataset
        self.attack = attack or AttackSpec()
        self.lr_schedule = lr_schedule or default_lr
        self.batch_size = batch_size
        self.test_set = test_set
        self.group = group
        self.record_test_acc = record_test_acc and test_set is not None

        self.node_ids = list(node_ids) if node_ids is not None else list(range(config.n_nodes))
        if len(self.node_ids) != config.n_nodes:
            raise ConfigError("node id list does not match configured N")
        if dataset.partition is None:
            raise ConfigError("dataset must be partitioned before training")
        missing = [i for i in self.node_ids if i not in dataset.partition]
        if missing:
            raise ConfigError(f"dataset partition missing nodes {missing}")

        self.order = agree_order(self.node_ids, config.seed)
        if config.byzantine_ids is not None:
            self.byzantine = frozenset(config.byzantine_ids)
        elif config.n_byzantine > 0:
            self.byzantine = sample_byzantine_ids(self.node_ids, config.n_byzantine, config.seed)
        else:
            self.byzantine = frozenset()
        unknown = self.byzantine - set(self.node_ids)
        if unknown:
            raise ConfigError(f"byzantine ids {sorted(unknown)} are not ring members")

        if initial_model is None and initial_models is None:
            initial_model = task.initial_model(config.seed)
        self.fifos: dict[int, StoredModels] = {}
        self.latest_output: dict[int, StoredEntry] = {}
        for node in self.node_ids:
            fifo = StoredModels(config.storage_depth)
            start = initial_models[node] if initial_models is not None else initial_model
            fifo.insert(None, 0, start)
            self.fifos[node] = fifo
            self.latest_output[node] = StoredEntry(node, 0, start)

        self.latest_benign: dict[int, ModelVector] = {}
        self.dropped: set[int] = set()
        self.round_idx = 0
        self.history = TrainHistory(manifest=manifest or {})

    # -- helpers ---------------------------------------------------------

    def is_benign(self, node: int) -> bool:
        return node not in self.byzantine

    def _local_batch(self, node: int, round_k: int) -> tuple[np.ndarray, np.ndarray]:
        indices = self.dataset.node_indices(node)
        if self.batch_size is None or self.batch_size >= len(indices):
            return self.dataset.batch(indices)
        rng = np.random.default_rng([self.config.seed, TAG_BATCH, node, round_k])
        picked = rng.choice(indices, size=self.batch_size, replace=False)
        return self.dataset.batch(picked)

    def _benign_model_pool(self) -> list[ModelVector]:
        return [self.latest_benign[i] for i in sorted(self.latest_benign)]

    def _test_accuracy(self, model: ModelVector) -> float | None:
        if not self.record_test_acc:
            return None
        X, y = self.test_set
        return accuracy(model, self.task, X, y)

    # -- protocol --------------------------------------------------------

    def run_round(self) -> None:
        k = self.round_idx + 1
        width = self.config.multicast_width
        n = len(self.order)
        lr = self.lr_schedule(k)
        for pos, node in enumerate(self.order):
            if node in self.dropped:
                continue
            X, y = self._local_batch(node, k)
            selection = basil_select(self.fifos[node], self.task, X, y)
            self.history.bump("loss_evaluations", len(selection.candidate_losses))
            if all(math.isinf(l) for _, l in selection.candidate_losses):
                self.history.events.append(
                    {"event": "protocol-failure", "round": k, "node": node}
                )
            honest = sgd_step(selection.model, self.task, X, y, lr)
            if self.is_benign(node):
                out = honest
                self.latest_benign[node] = out
                self.history.add_row(HistoryRow(
                    round=k,
                    node=node,
                    selected_sender=selection.sender,
                    train_loss=evaluate_loss(out, self.task, X, y),
                    test_acc=self._test_accuracy(out),
                    group=self.group,
                    candidate_losses=selection.candidate_losses,
                ))
            else:
                rng = np.random.default_rng([self.config.seed, TAG_ATTACK, node, k])
                out = apply_attack(
                    self.attack,
                    honest_update=honest,
                    prior=selection.model,
                    benign_models=self._benign_model_pool(),
                    round_k=k,
                    rng=rng,
                )
            self.latest_output[node] = StoredEntry(node, k, out)
            for s in range(1, width + 1):
                target = self.order[(pos + s) % n]
                self.history.bump("models_sent")
                if target in self.dropped or target == node:
                    continue
                self.fifos[target].insert(node, k, out)
                self.history.bump("fifo_inserts")
            self.history.bump("activations")
        self.round_idx = k

    def run(self, rounds: int) -> TrainHistory:
        for _ in range(rounds):
            self.run_round()
        return self.history

    # -- dropout / rejoin --------------------------------------------------

    def drop_node(self, node: int) -> None:
        if node not in self.fifos:
            raise ConfigError(f"node {node} does not exist")
        if node in self.dropped:
            raise ConfigError(f"node {node} is already dropped")
        self.dropped.add(node)
        self.history.events.append({"event": "drop", "round": self.round_idx, "node": node})

    def rejoin_node(self, node: int) -> None:
        """Restore a dropped node's queue from its counterclockwise neighbours.

        The ``b + d + 1`` nearest active counterclockwise neighbours each send
        their latest model; the queue (depth ``b + 1``) keeps the newest.
        """
        if node not in self.fifos:
            raise ConfigError(f"node {node} never existed")
        if node not in self.dropped:
            raise ConfigError(f"node {node} was not dropped")
        self.dropped.remove(node)
        want = self.config.n_byzantine + self.config.n_dropout + 1
        pos = self.order.index(node)
        n = len(self.order)
        received: list[StoredEntry] = []
        step = 1
        while len(received) < want and step < n:
            neighbour = self.order[(pos - step) % n]
            step += 1
            if neighbour in self.dropped:
                continue
            received.append(self.latest_output[neighbour])
        fifo = StoredModels(self.config.storage_depth)
        # oldest first so the queue retains the most recently produced models
        for entry in sorted(received, key=lambda e: e.round):
            fifo.insert(entry.sender, entry.round, entry.model)
        self.fifos[node] = fifo
        self.history.events.append({"event": "rejoin", "round": self.round_idx, "node": node})


def run_basil(
    config: RingConfig,
    task: LossTask,
    dataset: Dataset,
    rounds: int,
    *,
    attack: AttackSpec | None = None,
    lr_schedule: Callable[[int], float] | None = None,
    batch_size: int | None = DEFAULT_BATCH_SIZE,
    test_set=None,
    initial_model: ModelVector | None = None,
    manifest: dict | None = None,
) -> TrainHistory:
    """Run ``rounds`` full passes of the ring protocol and return the history."""
    ring = BasilRing(
        config,
        task,
        dataset,
        attack=attack,
        lr_schedule=lr_schedule,
        batch_size=batch_size,
        test_set=test_set,
        initial_model=initial_model,
        manifest=manifest,
    )
    return ring.run(rounds)
