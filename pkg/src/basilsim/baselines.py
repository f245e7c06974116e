"""Comparison schemes: unfiltered rings, plain gossip averaging, and the
two-stage distance/performance graph defence."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .attacks import AttackSpec, apply_attack
from .basil_plus import cluster_nodes
from .data import Dataset
from .errors import ConfigError
from .history import HistoryRow, TrainHistory
from .models import (
    LossTask,
    ModelVector,
    accuracy,
    average_models,
    evaluate_loss,
    sgd_step,
)
from .ring import (
    DEFAULT_BATCH_SIZE,
    TAG_ATTACK,
    TAG_BATCH,
    agree_order,
    default_lr,
    sample_byzantine_ids,
)

TAG_GRAPH = 0xD0


@dataclass(frozen=True)
class GraphTopology:
    """Undirected communication graph without self-loops."""

    adjacency: dict[int, frozenset[int]]
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        for node, nbrs in self.adjacency.items():
            if node in nbrs:
                raise ConfigError(f"self-loop at node {node}")
            for other in nbrs:
                if node not in self.adjacency.get(other, frozenset()):
                    raise ConfigError(f"edge {node}-{other} is not symmetric")

    def neighbours(self, node: int) -> frozenset[int]:
        return self.adjacency[node]

    def write_edge_list(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for node in sorted(self.adjacency):
                for other in sorted(self.adjacency[node]):
                    if node < other:
                        fh.write(f"{node} {other}\n")


def _benign_connected(adj: dict[int, set[int]], benign: list[int]) -> bool:
    if not benign:
        return True
    benign_set = set(benign)
    seen = {benign[0]}
    frontier = [benign[0]]
    while frontier:
        cur = frontier.pop()
        for nxt in adj[cur]:
            if nxt in benign_set and nxt not in seen:
                seen.add(nxt)
                frontier.append(nxt)
    return len(seen) == len(benign)


def build_random_graph(
    node_ids,
    byzantine_ids,
    seed: int,
    edge_prob_benign: float = 0.4,
    edge_prob_byzantine: float = 0.4,
    max_retries: int = 100,
) -> GraphTopology:
    """Random graph: benign-benign edges with one probability, benign-Byzantine
    with another.  Retries seeds until the benign subgraph is connected."""
    ids = sorted(node_ids)
    byz = set(byzantine_ids)
    benign = [i for i in ids if i not in byz]
    for attempt in range(max_retries):
        rng = np.random.default_rng([int(seed), TAG_GRAPH, attempt])
        adj: dict[int, set[int]] = {i: set() for i in ids}
        for a_idx, a in enumerate(ids):
            for b in ids[a_idx + 1:]:
                both_byz = a in byz and b in byz
                if both_byz:
                    continue
                p = edge_prob_benign if (a not in byz and b not in byz) else edge_prob_byzantine
                if rng.random() < p:
                    adj[a].add(b)
                    adj[b].add(a)
        if _benign_connected(adj, benign):
            return GraphTopology(
                {i: frozenset(adj[i]) for i in ids},
                {
                    "seed": seed, "attempt": attempt,
                    "edge_prob_benign": edge_prob_benign,
                    "edge_prob_byzantine": edge_prob_byzantine,
                },
            )
    raise ConfigError(f"no connected benign subgraph within {max_retries} seeds")


@dataclass
class RingPlainState:
    """Unfiltered sequential training: each node continues from its
    counterclockwise neighbour's model."""

    order: tuple[int, ...]
    models: dict[int, ModelVector]
    byzantine: frozenset[int]
    seed: int
    round_idx: int = 0
    carried: ModelVector | None = None


def make_r_plain_state(
    n_nodes: int, n_byzantine: int, seed: int,
    initial_model: ModelVector, byzantine_ids=None,
) -> RingPlainState:
    ids = list(range(n_nodes))
    order = agree_order(ids, seed)
    if byzantine_ids is not None:
        byz = frozenset(byzantine_ids)
    elif n_byzantine > 0:
        byz = sample_byzantine_ids(ids, n_byzantine, seed)
    else:
        byz = frozenset()
    return RingPlainState(order, {i: initial_model for i in ids}, byz, seed,
                          carried=initial_model)


def _draw_batch(dataset: Dataset, node: int, round_k: int, seed: int,
                batch_size: int | None):
    indices = dataset.node_indices(node)
    if batch_size is None or batch_size >= len(indices):
        return dataset.batch(indices)
    rng = np.random.default_rng([seed, TAG_BATCH, node, round_k])
    return dataset.batch(rng.choice(indices, size=batch_size, replace=False))


def r_plain_round(
    state: RingPlainState, task: LossTask, dataset: Dataset,
    attack: AttackSpec | None = None,
    lr_schedule: Callable[[int], float] | None = None,
    batch_size: int | None = DEFAULT_BATCH_SIZE,
    history: TrainHistory | None = None,
    test_set=None,
) -> RingPlainState:
    """One sequential ring pass with no filtering (connectivity one)."""
    attack = attack or AttackSpec()
    lr_schedule = lr_schedule or default_lr
    k = state.round_idx + 1
    lr = lr_schedule(k)
    benign_pool = lambda: [state.models[i] for i in sorted(state.models)
                           if i not in state.byzantine]
    for node in state.order:
        X, y = _draw_batch(dataset, node, k, state.seed, batch_size)
        prior = state.carried
        honest = sgd_step(prior, task, X, y, lr)
        if node in state.byzantine:
            rng = np.random.default_rng([state.seed, TAG_ATTACK, node, k])
            out = apply_attack(attack, honest_update=honest, prior=prior,
                               benign_models=benign_pool(), round_k=k, rng=rng)
        else:
            out = honest
            if history is not None:
                acc = accuracy(out, task, *test_set) if test_set else None
                history.add_row(HistoryRow(
                    round=k, node=node, selected_sender=None,
                    train_loss=evaluate_loss(out, task, X, y), test_acc=acc,
                ))
        state.models[node] = out
        state.carried = out
    state.round_idx = k
    return state


def run_r_plain(
    n_nodes: int, n_byzantine: int, seed: int, task: LossTask, dataset: Dataset,
    rounds: int, *, attack=None, lr_schedule=None,
    batch_size: int | None = DEFAULT_BATCH_SIZE, test_set=None,
    initial_model=None, byzantine_ids=None, manifest=None,
) -> TrainHistory:
    initial_model = initial_model or task.initial_model(seed)
    state = make_r_plain_state(n_nodes, n_byzantine, seed, initial_model, byzantine_ids)
    history = TrainHistory(manifest=manifest or {})
    for _ in range(rounds):
        r_plain_round(state, task, dataset, attack, lr_schedule, batch_size,
                      history, test_set)
    return history


@dataclass
class GraphState:
    """Synchronous graph training state: all reads in a round use the
    previous round's models."""

    topology: GraphTopology
    models: dict[int, ModelVector]
    byzantine: frozenset[int]
    seed: int
    round_idx: int = 0
    audit: dict[int, dict] = field(default_factory=dict)


def make_graph_state(
    topology: GraphTopology, byzantine_ids, seed: int, initial_model: ModelVector
) -> GraphState:
    models = {i: initial_model for i in topology.adjacency}
    return GraphState(topology, models, frozenset(byzantine_ids), seed)


def _graph_attack_outputs(state: GraphState, task, dataset, attack, lr, k,
                          batch_size) -> dict[int, ModelVector]:
    """What each Byzantine node sends this round (same output to all neighbours)."""
    outs = {}
    benign_pool = [state.models[i] for i in sorted(state.models)
                   if i not in state.byzantine]
    for node in sorted(state.byzantine):
        X, y = _draw_batch(dataset, node, k, state.seed, batch_size)
        honest = sgd_step(state.models[node], task, X, y, lr)
        rng = np.random.default_rng([state.seed, TAG_ATTACK, node, k])
        outs[node] = apply_attack(attack, honest_update=honest,
                                  prior=state.models[node],
                                  benign_models=benign_pool, round_k=k, rng=rng)
    return outs


def g_plain_round(
    state: GraphState, task: LossTask, dataset: Dataset,
    attack: AttackSpec | None = None,
    lr_schedule: Callable[[int], float] | None = None,
    batch_size: int | None = DEFAULT_BATCH_SIZE,
    history: TrainHistory | None = None,
    test_set=None,
) -> GraphState:
    """Plain gossip: average own model with all neighbours', then step."""
    attack = attack or AttackSpec()
    lr_schedule = lr_schedule or default_lr
    k = state.round_idx + 1
    lr = lr_schedule(k)
    byz_out = _graph_attack_outputs(state, task, dataset, attack, lr, k, batch_size)
    new_models: dict[int, ModelVector] = {}
    for node in sorted(state.models):
        if node in state.byzantine:
            new_models[node] = byz_out[node]
            continue
        received = [
            byz_out[j] if j in state.byzantine else state.models[j]
            for j in sorted(state.topology.neighbours(node))
        ]
        avg = average_models([state.models[node]] + received)
        X, y = _draw_batch(dataset, node, k, state.seed, batch_size)
        out = sgd_step(avg, task, X, y, lr)
        new_models[node] = out
        if history is not None:
            acc = accuracy(out, task, *test_set) if test_set else None
            history.add_row(HistoryRow(
                round=k, node=node, selected_sender=None,
                train_loss=evaluate_loss(out, task, X, y), test_acc=acc,
            ))
    state.models = new_models
    state.round_idx = k
    return state


def ubar_round(
    state: GraphState, task: LossTask, dataset: Dataset,
    rho: float = 0.33,
    mixing: float = 0.5,
    attack: AttackSpec | None = None,
    lr_schedule: Callable[[int], float] | None = None,
    batch_size: int | None = DEFAULT_BATCH_SIZE,
    history: TrainHistory | None = None,
    test_set=None,
) -> GraphState:
    """Two-stage graph defence round.

    Stage 1 keeps the ``ceil(rho * degree)`` neighbours closest in Euclidean
    distance to the node's own model; stage 2 keeps those whose loss on a
    local mini-batch does not exceed the node's own, averaging them (or
    falling back to the single lowest-loss stage-1 candidate).  The update
    mixes the node's model with the aggregate before the gradient step.
    """
    if not 0 < rho <= 1:
        raise ConfigError("rho must lie in (0, 1]")
    attack = attack or AttackSpec()
    lr_schedule = lr_schedule or default_lr
    k = state.round_idx + 1
    lr = lr_schedule(k)
    byz_out = _graph_attack_outputs(state, task, dataset, attack, lr, k, batch_size)
    new_models: dict[int, ModelVector] = {}
    state.audit = {}
    for node in sorted(state.models):
        if node in state.byzantine:
            new_models[node] = byz_out[node]
            continue
        nbrs = sorted(state.topology.neighbours(node))
        if not nbrs:
            raise ConfigError(f"node {node} has no neighbours")
        own = state.models[node]
        received = {
            j: (byz_out[j] if j in state.byzantine else state.models[j]) for j in nbrs
        }
        keep = math.ceil(rho * len(nbrs))
        by_distance = sorted(
            nbrs, key=lambda j: (float(np.linalg.norm(received[j].params - own.params)), j)
        )
        pool = by_distance[:keep]
        X, y = _draw_batch(dataset, node, k, state.seed, batch_size)
        own_loss = evaluate_loss(own, task, X, y)
        losses = {
            j: (evaluate_loss(received[j], task, X, y)
                if received[j].is_finite() else math.inf)
            for j in pool
        }
        accepted = [j for j in pool if losses[j] <= own_loss]
        if accepted:
            aggregate = average_models([received[j] for j in accepted])
        else:
            j_star = min(pool, key=lambda j: (losses[j], j))
            accepted = [j_star]
            aggregate = received[j_star]
        grad_step = sgd_step(own, task, X, y, lr)
        mixed = mixing * own.params + (1.0 - mixing) * aggregate.params
        out = own.with_params(mixed - (own.params - grad_step.params))
        new_models[node] = out
        state.audit[node] = {"pool": pool, "accepted": accepted, "own_loss": own_loss,
                             "losses": losses}
        if history is not None:
            acc = accuracy(out, task, *test_set) if test_set else None
            history.add_row(HistoryRow(
                round=k, node=node, selected_sender=None,
                train_loss=evaluate_loss(out, task, X, y), test_acc=acc,
            ))
    state.models = new_models
    state.round_idx = k
    return state


def run_graph_scheme(
    scheme: str, topology: GraphTopology, byzantine_ids, seed: int,
    task: LossTask, dataset: Dataset, rounds: int, *,
    rho: float = 0.33, mixing: float = 0.5, attack=None, lr_schedule=None,
    batch_size: int | None = DEFAULT_BATCH_SIZE, test_set=None,
    initial_model=None, manifest=None,
) -> TrainHistory:
    initial_model = initial_model or task.initial_model(seed)
    state = make_graph_state(topology, byzantine_ids, seed, initial_model)
    history = TrainHistory(manifest=manifest or {})
    for _ in range(rounds):
        if scheme == "g-plain":
            g_plain_round(state, task, dataset, attack, lr_schedule, batch_size,
                          history, test_set)
        elif scheme == "ubar":
            ubar_round(state, task, dataset, rho, mixing, attack, lr_schedule,
                       batch_size, history, test_set)
        else:
            raise ConfigError(f"unknown graph scheme {scheme!r}")
    return history


@dataclass
class RingPlainPlusState:
    groups: list[RingPlainState]
    round_idx: int = 0


def make_r_plain_plus_state(
    n_nodes: int, n_groups: int, n_byzantine: int, seed: int,
    initial_model: ModelVector, byzantine_ids=None,
) -> RingPlainPlusState:
    ids = list(range(n_nodes))
    if byzantine_ids is not None:
        byz = frozenset(byzantine_ids)
    elif n_byzantine > 0:
        byz = sample_byzantine_ids(ids, n_byzantine, seed)
    else:
        byz = frozenset()
    groups = cluster_nodes(ids, n_groups, seed)
    states = []
    for state in groups:
        states.append(RingPlainState(
            state.members, {i: initial_model for i in state.members},
            byz & frozenset(state.members), seed, carried=initial_model,
        ))
    return RingPlainPlusState(states)


def r_plain_plus_round(
    plus: RingPlainPlusState, task: LossTask, dataset: Dataset,
    tau: int = 1, attack=None, lr_schedule=None,
    batch_size: int | None = DEFAULT_BATCH_SIZE,
    history: TrainHistory | None = None, test_set=None,
) -> RingPlainPlusState:
    """One global round: ``tau`` unfiltered ring passes per group, then the
    groups' last-node models are averaged and handed to every group head."""
    for state in plus.groups:
        for _ in range(tau):
            r_plain_round(state, task, dataset, attack, lr_schedule, batch_size,
                          history, test_set)
    tails = [state.models[state.order[-1]] for state in plus.groups]
    mean_model = average_models(tails)
    for state in plus.groups:
        head = state.order[0]
        state.models[head] = mean_model
        state.carried = mean_model
    plus.round_idx += 1
    return plus
