"""Grouped parallel ring training with robust circular aggregation.

Nodes split into ``G`` ring groups.  Every global round: (1) each group runs
the sequential ring protocol for ``tau`` rounds in parallel, (2) the groups'
tail nodes pass a running average around the ring of groups, filtering
received candidates with the performance-based rule, (3) the last group's
tails hand the result to the first group's tails, which filter and multicast
to every group's head nodes, and those adopt the filtered model as the next
round's start.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .attacks import AttackSpec, apply_attack
from .data import Dataset
from .errors import ConfigError, ProtocolError
from .history import HistoryRow, TrainHistory
from .models import LossTask, ModelVector, evaluate_loss, sgd_step
from .ring import (
    DEFAULT_BATCH_SIZE,
    BasilRing,
    RingConfig,
    StoredEntry,
    StoredModels,
    agree_order,
    basil_select,
    default_lr,
    sample_byzantine_ids,
)

TAG_CLUSTER = 0xC0
TAG_STAGE_BATCH = 0xC1
TAG_STAGE_ATTACK = 0xC2


@dataclass
class GroupState:
    """One group's ring order, connectivity, and per-member models."""

    gid: int
    members: tuple[int, ...]
    connectivity: int
    models: dict[int, ModelVector] = field(default_factory=dict)
    aggregates: dict[int, ModelVector] = field(default_factory=dict)

    def __post_init__(self):
        if not 1 <= self.connectivity <= len(self.members) - 1 and len(self.members) > 1:
            raise ConfigError("group connectivity must satisfy 1 <= S <= n-1")

    @property
    def tail_set(self) -> tuple[int, ...]:
        """Last ``S`` members of the ring order (the aggregation senders)."""
        return self.members[-self.connectivity:]

    @property
    def head_set(self) -> tuple[int, ...]:
        """First ``S`` members of the ring order (the multicast receivers)."""
        return self.members[: self.connectivity]

    def tail_aggregates(self) -> list[tuple[int, ModelVector]]:
        return [(m, self.aggregates[m]) for m in self.tail_set]


@dataclass(frozen=True)
class GroupConfig:
    """Census for grouped training."""

    n_nodes: int
    n_groups: int
    n_byzantine: int = 0
    connectivity: int | None = None
    seed: int = 0
    byzantine_ids: frozenset[int] | None = None

    def __post_init__(self):
        if self.n_groups < 1 or self.n_nodes % self.n_groups != 0:
            raise ConfigError("group count must divide node count")
        n = self.group_size
        s = self.resolved_connectivity
        if n > 1 and not 1 <= s <= n - 1:
            raise ConfigError("need 1 <= S <= n-1 within each group")

    @property
    def group_size(self) -> int:
        return self.n_nodes // self.n_groups

    @property
    def resolved_connectivity(self) -> int:
        if self.connectivity is not None:
            return self.connectivity
        return min(self.group_size - 1, self.n_byzantine + 1)


def _group_seed(seed: int, gid: int) -> int:
    return int(seed) * 131071 + gid + 1


def cluster_nodes(node_ids, G: int, seed: int, connectivity: int = 1) -> list[GroupState]:
    """Seeded random split into ``G`` equal groups, each with its own ring order."""
    ids = sorted(node_ids)
    if G < 1 or len(ids) % G != 0:
        raise ConfigError(f"group count {G} must divide node count {len(ids)}")
    perm = list(ids)
    np.random.default_rng([int(seed), TAG_CLUSTER]).shuffle(perm)
    n = len(ids) // G
    states = []
    for g in range(G):
        members = agree_order(perm[g * n:(g + 1) * n], _group_seed(seed, g))
        states.append(GroupState(g, members, connectivity))
    return states


def _select_from(
    candidates: list[tuple[int, ModelVector]], task: LossTask, X, y
) -> tuple[ModelVector, int, tuple]:
    """Performance-based pick from an explicit candidate list (first wins ties)."""
    queue = StoredModels(capacity=len(candidates))
    for sender, model in reversed(candidates):
        queue.insert(sender, 0, model)
    sel = basil_select(queue, task, X, y)
    return sel.model, sel.sender, sel.candidate_losses


class BasilPlusDriver:
    """Stateful driver for grouped training; exposes group states for inspection."""

    def __init__(
        self,
        config: GroupConfig,
        task: LossTask,
        dataset: Dataset,
        *,
        tau: int = 1,
        attack: AttackSpec | None = None,
        lr_schedule: Callable[[int], float] | None = None,
        batch_size: int | None = DEFAULT_BATCH_SIZE,
        epochs: int | None = None,
        test_set=None,
        initial_model: ModelVector | None = None,
        manifest: dict | None = None,
    ):
        if tau < 0:
            raise ConfigError("tau must be >= 0")
        self.config = config
        self.task = task
        self.dataset = dataset
        self.tau = tau
        self.attack = attack or AttackSpec()
        self.base_lr = lr_schedule or default_lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.test_set = test_set

        node_ids = list(range(config.n_nodes))
        if config.byzantine_ids is not None:
            self.byzantine = frozenset(config.byzantine_ids)
        elif config.n_byzantine > 0:
            self.byzantine = sample_byzantine_ids(node_ids, config.n_byzantine, config.seed)
        else:
            self.byzantine = frozenset()

        S = config.resolved_connectivity
        self.groups = cluster_nodes(node_ids, config.n_groups, config.seed, S)
        if initial_model is None:
            initial_model = task.initial_model(config.seed)
        for state in self.groups:
            for m in state.members:
                state.models[m] = initial_model

        self.history = TrainHistory(manifest=manifest or {})
        self.global_round = 0
        self.rings: dict[int, BasilRing] = {}
        for state in self.groups:
            gseed = _group_seed(config.seed, state.gid)
            group_byz = frozenset(state.members) & self.byzantine
            if len(group_byz) >= len(state.members):
                raise ProtocolError(f"group {state.gid} contains only Byzantine nodes")
            ring_cfg = RingConfig(
                n_nodes=len(state.members),
                n_byzantine=len(group_byz),
                connectivity=S,
                seed=gseed,
                byzantine_ids=group_byz,
            )
            tau_ = max(self.tau, 1)
            ring = BasilRing(
                ring_cfg,
                task,
                dataset,
                attack=self.attack,
                lr_schedule=(lambda k, t=tau_: self.base_lr((k - 1) // t + 1)),
                batch_size=batch_size,
                test_set=test_set,
                initial_models=dict(state.models),
                node_ids=list(state.members),
                group=state.gid,
            )
            ring.history = self.history
            self.rings[state.gid] = ring

    # -- helpers -----------------------------------------------------------

    def is_benign(self, node: int) -> bool:
        return node not in self.byzantine

    _STAGE_IDS = {"aggregate": 1, "multicast": 2, "adopt": 3, "local": 4}

    def _stage_batch(self, node: int, stage: str):
        indices = self.dataset.node_indices(node)
        if self.batch_size is None or self.batch_size >= len(indices):
            return self.dataset.batch(indices)
        rng = np.random.default_rng(
            [self.config.seed, TAG_STAGE_BATCH, self._STAGE_IDS[stage], node,
             self.global_round])
        return self.dataset.batch(rng.choice(indices, size=self.batch_size, replace=False))

    def _benign_pool(self) -> list[ModelVector]:
        pool = {}
        for ring in self.rings.values():
            pool.update(ring.latest_benign)
        return [pool[i] for i in sorted(pool)]

    def _emit(self, node: int, honest: ModelVector, prior: ModelVector, stage: str) -> ModelVector:
        if self.is_benign(node):
            return honest
        rng = np.random.default_rng(
            [self.config.seed, TAG_STAGE_ATTACK, self._STAGE_IDS[stage], node,
             self.global_round]
        )
        return apply_attack(
            self.attack,
            honest_update=honest,
            prior=prior,
            benign_models=self._benign_pool(),
            round_k=self.global_round * max(self.tau, 1),
            rng=rng,
        )

    def _audit(self, stage: str, node: int, gid: int, sender: int, losses) -> None:
        self.history.events.append({
            "event": f"{stage}-select",
            "round": self.global_round,
            "group": gid,
            "node": node,
            "sender": sender,
            "losses": [(s, l) for s, l in losses],
        })

    # -- stages ------------------------------------------------------------

    def _stage_local_training(self) -> None:
        for state in self.groups:
            ring = self.rings[state.gid]
            if self.global_round > 1:
                self._reset_ring(ring, state)
            if self.epochs:
                self._run_epochs(ring, state)
            else:
                ring.run(self.tau)
            for m in state.members:
                state.models[m] = ring.latest_output[m].model
                state.aggregates[m] = state.models[m]

    def _reset_ring(self, ring: BasilRing, state: GroupState) -> None:
        for m in state.members:
            fifo = StoredModels(ring.config.storage_depth)
            fifo.insert(None, ring.round_idx, state.models[m])
            ring.fifos[m] = fifo
            ring.latest_output[m] = StoredEntry(m, ring.round_idx, state.models[m])

    def _run_epochs(self, ring: BasilRing, state: GroupState) -> None:
        """Epoch-based local training mode: each activation runs ``epochs``
        full passes of mini-batch SGD instead of a single step."""
        for _ in range(self.tau):
            k = ring.round_idx + 1
            lr = ring.lr_schedule(k)
            for pos, node in enumerate(ring.order):
                X, y = ring._local_batch(node, k)
                sel = basil_select(ring.fifos[node], self.task, X, y)
                model = sel.model
                indices = self.dataset.node_indices(node)
                rng = np.random.default_rng([ring.config.seed, 0xEE, node, k])
                bs = self.batch_size or len(indices)
                for _e in range(self.epochs):
                    order = rng.permutation(indices)
                    for start in range(0, len(order) - bs + 1, bs):
                        bx, by = self.dataset.batch(order[start:start + bs])
                        model = sgd_step(model, self.task, bx, by, lr)
                out = model if ring.is_benign(node) else self._emit(node, model, sel.model, "local")
                if ring.is_benign(node):
                    ring.latest_benign[node] = out
                    ring.history.add_row(HistoryRow(
                        round=k, node=node, selected_sender=sel.sender,
                        train_loss=evaluate_loss(out, self.task, X, y),
                        test_acc=ring._test_accuracy(out), group=ring.group,
                        candidate_losses=sel.candidate_losses,
                    ))
                ring.latest_output[node] = StoredEntry(node, k, out)
                n = len(ring.order)
                for s in range(1, ring.config.multicast_width + 1):
                    ring.fifos[ring.order[(pos + s) % n]].insert(node, k, out)
            ring.round_idx = k

    def _stage_circular_aggregation(self) -> None:
        for gi in range(len(self.groups) - 1):
            upstream = self.groups[gi]
            downstream = self.groups[gi + 1]
            candidates = upstream.tail_aggregates()
            g_mult = gi + 1
            for node in downstream.tail_set:
                X, y = self._stage_batch(node, "aggregate")
                zbar, sender, losses = _select_from(candidates, self.task, X, y)
                honest = downstream.models[node].with_params(
                    (downstream.models[node].params + g_mult * zbar.params) / (g_mult + 1)
                )
                out = self._emit(node, honest, zbar, "aggregate")
                if self.is_benign(node):
                    self._audit("aggregate", node, downstream.gid, sender, losses)
                downstream.aggregates[node] = out

    def _stage_robust_multicast(self) -> None:
        first = self.groups[0]
        last = self.groups[-1]
        filtered: list[tuple[int, ModelVector]] = []
        for node in first.tail_set:
            X, y = self._stage_batch(node, "multicast")
            zbar, sender, losses = _select_from(last.tail_aggregates(), self.task, X, y)
            out = self._emit(node, zbar, zbar, "multicast")
            if self.is_benign(node):
                self._audit("multicast", node, first.gid, sender, losses)
            filtered.append((node, out))
        for state in self.groups:
            for node in state.head_set:
                X, y = self._stage_batch(node, "adopt")
                adopted, sender, losses = _select_from(filtered, self.task, X, y)
                if self.is_benign(node):
                    self._audit("adopt", node, state.gid, sender, losses)
                state.models[node] = adopted

    # -- driver --------------------------------------------------------------

    def run_global_round(self) -> None:
        self.global_round += 1
        self._stage_local_training()
        self._stage_circular_aggregation()
        self._stage_robust_multicast()

    def run(self, K: int) -> TrainHistory:
        for _ in range(K):
            self.run_global_round()
        return self.history


def circular_aggregate(
    states: list[GroupState],
    task: LossTask,
    batch_for: Callable[[int], tuple[np.ndarray, np.ndarray]],
) -> list[GroupState]:
    """Standalone aggregation pass over prepared group states (benign only).

    Each downstream tail node selects from the upstream tails with the
    performance rule and folds its own model into the running average.
    """
    for gi in range(len(states) - 1):
        upstream, downstream = states[gi], states[gi + 1]
        candidates = upstream.tail_aggregates()
        g_mult = gi + 1
        for node in downstream.tail_set:
            X, y = batch_for(node)
            zbar, _, _ = _select_from(candidates, task, X, y)
            downstream.aggregates[node] = downstream.models[node].with_params(
                (downstream.models[node].params + g_mult * zbar.params) / (g_mult + 1)
            )
    return states


def robust_multicast(
    states: list[GroupState],
    task: LossTask,
    batch_for: Callable[[int], tuple[np.ndarray, np.ndarray]],
) -> dict[int, ModelVector]:
    """Standalone final hand-off: filter at the first group's tails, then at
    every head node; returns the adopted model per head node."""
    first, last = states[0], states[-1]
    filtered = []
    for node in first.tail_set:
        X, y = batch_for(node)
        zbar, _, _ = _select_from(last.tail_aggregates(), task, X, y)
        filtered.append((node, zbar))
    adopted: dict[int, ModelVector] = {}
    for state in states:
        for node in state.head_set:
            X, y = batch_for(node)
            model, _, _ = _select_from(filtered, task, X, y)
            adopted[node] = model
            state.models[node] = model
    return adopted


def run_basil_plus(
    config: GroupConfig,
    task: LossTask,
    dataset: Dataset,
    K: int,
    tau: int = 1,
    *,
    attack: AttackSpec | None = None,
    lr_schedule=None,
    batch_size: int | None = DEFAULT_BATCH_SIZE,
    epochs: int | None = None,
    test_set=None,
    initial_model=None,
    manifest: dict | None = None,
) -> TrainHistory:
    driver = BasilPlusDriver(
        config, task, dataset,
        tau=tau, attack=attack, lr_schedule=lr_schedule, batch_size=batch_size,
        epochs=epochs, test_set=test_set, initial_model=initial_model, manifest=manifest,
    )
    return driver.run(K)
