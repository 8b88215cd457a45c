"""FedAvg over a roster of benign, malicious and sybil clients."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import attack as atk
from .data import LabeledDataset, select_base, select_class
from .training import (STREAM_POISON, STREAM_SELECT, STREAM_TARGET, STREAM_TRAIN, TrainParams,
                       client_rng, local_train)

log = logging.getLogger(__name__)

BENIGN, MALICIOUS, SYBIL = "benign", "malicious", "sybil"


@dataclass(frozen=True)
class ClientRecord:
    id: int
    role: str
    dataset: Optional[LabeledDataset] = None
    owner: Optional[int] = None


@dataclass(frozen=True)
class SelectionPolicy:
    """Full participation (``fraction=1``) or seeded uniform sampling of a fraction."""
    fraction: float = 1.0

    def __post_init__(self):
        if not 0 < self.fraction <= 1:
            raise ValueError(f"participation fraction must lie in (0, 1], got {self.fraction}")


@dataclass
class FederationState:
    round: int
    params: np.ndarray
    roster: list
    history: list = field(default_factory=list)
    target: Optional[np.ndarray] = None  # offline target, fixed for the run
    last_poison: Optional[atk.PoisonBatch] = None


@dataclass(frozen=True)
class Setup:
    model: object
    train: TrainParams
    seed: int
    policy: SelectionPolicy = SelectionPolicy()
    evaluator: Optional[Callable] = None  # (params, round) -> metrics record


def build_roster(datasets, num_malicious: int, v: int) -> list:
    """Clients 0..M-1 are malicious, M..N-1 benign, then v sybils per malicious client."""
    n = len(datasets)
    if not 0 <= num_malicious <= n:
        raise ValueError("malicious count exceeds client count")
    roster = [ClientRecord(i, MALICIOUS if i < num_malicious else BENIGN, d) for i, d in enumerate(datasets)]
    for owner in range(num_malicious):
        for j in range(v):
            roster.append(ClientRecord(n + owner * v + j, SYBIL, None, owner))
    return roster


def aggregate(params_list, dataset_sizes) -> np.ndarray:
    """Size-weighted coordinate-wise mean."""
    if len(params_list) == 0:
        raise ValueError("nothing to aggregate")
    if len(params_list) != len(dataset_sizes):
        raise ValueError("one size per parameter vector required")
    sizes = np.asarray(dataset_sizes, dtype=np.float64)
    if np.any(sizes < 0):
        raise ValueError("dataset sizes must be nonnegative")
    total = sizes.sum()
    if total <= 0:
        raise ValueError("total dataset size is zero")
    stacked = np.stack([np.asarray(p, dtype=np.float64) for p in params_list])
    return (sizes / total) @ stacked


def select_clients(round_: int, roster, policy: SelectionPolicy = SelectionPolicy(), seed: int = 0) -> list:
    if not roster:
        raise ValueError("empty roster")
    ids = [c.id for c in roster]
    if policy.fraction >= 1.0:
        return ids
    k = max(1, int(round(policy.fraction * len(ids))))
    rng = client_rng(seed, 0, round_, STREAM_SELECT)
    return sorted(np.asarray(ids)[rng.choice(len(ids), size=k, replace=False)].tolist())


def prepare_state(params, roster, setup: Setup, attack: Optional[atk.AttackConfig] = None) -> FederationState:
    """Initial state; the offline target (if any) is computed here, before round 0."""
    state = FederationState(0, np.array(params, dtype=np.float64), list(roster))
    if attack is not None and attack.method != "fcm" and attack.scheme == "offline":
        mal = [c.dataset for c in roster if c.role == MALICIOUS and len(c.dataset)]
        if mal:
            # attacker's own seed stream, distinct from the server's init seed
            state.target = atk.acquire_target_offline(setup.model, mal, attack.r_pre, attack, setup.train,
                                                      seed=setup.seed + 7919)
    return state


def _targets(state, setup, attack, malicious, r):
    """w_tar per malicious client id (None where it cannot be formed)."""
    model, w = setup.model, state.params
    rng = lambda c: client_rng(setup.seed, c.id, r, STREAM_TARGET)
    if attack.method == "lm":
        out = {}
        for c in malicious:
            out[c.id] = (atk.lm_target(model, w, c.dataset, attack, setup.train, rng(c))
                         if len(select_class(c.dataset, attack.y_tar)) else None)
        return out
    if attack.scheme == "offline":
        return {c.id: state.target for c in malicious}
    if attack.scheme == "online-local":
        return {c.id: atk.acquire_target_local(model, w, c.dataset, attack, setup.train, rng(c)) if len(c.dataset) else None
                for c in malicious}
    usable = [c for c in malicious if len(c.dataset)]
    if not usable:
        return {c.id: None for c in malicious}
    shared = atk.acquire_target_global(model, w, [c.dataset for c in usable], attack, setup.train,
                                       [rng(c) for c in usable])
    return {c.id: shared for c in malicious}


def _craft(state, setup, attack, malicious, r):
    """Poison batch per malicious client id; None means its sybils sit out this round."""
    model, w = setup.model, state.params
    poisons = {}
    if attack.method == "fcm":
        for c in malicious:
            rng = client_rng(setup.seed, c.id, r, STREAM_POISON)
            targets = select_class(c.dataset, attack.y_tar)
            if len(targets) == 0:
                poisons[c.id] = None
                continue
            t = targets.images[rng.integers(len(targets))]
            poisons[c.id] = atk.fcm_poison(select_base(c.dataset, attack.y_adv), t, w, model, attack, rng)
        return poisons
    targets = _targets(state, setup, attack, malicious, r)
    for c in malicious:
        w_tar = targets[c.id]
        if w_tar is None:
            poisons[c.id] = None
            continue
        rng = client_rng(setup.seed, c.id, r, STREAM_POISON)
        poisons[c.id] = atk.generate_poison(select_base(c.dataset, attack.y_adv), w, w_tar, model, attack, rng)
    return poisons


def run_round(state: FederationState, setup: Setup, attack: Optional[atk.AttackConfig] = None) -> FederationState:
    """One communication round; returns a new state (the input is not modified)."""
    r = state.round
    model, w = setup.model, state.params
    selected = set(select_clients(r, state.roster, setup.policy, setup.seed))
    by_id = {c.id: c for c in state.roster}

    poisons = {}
    last_poison = state.last_poison
    if attack is not None and attack.in_window(r):
        active_owners = {c.owner for c in state.roster if c.role == SYBIL and c.id in selected}
        malicious = [c for c in state.roster if c.role == MALICIOUS and c.id in active_owners]
        poisons = _craft(state, setup, attack, malicious, r)
        for c in malicious:
            if poisons.get(c.id) is not None:
                last_poison = poisons[c.id]
                break

    uploads, sizes = [], []
    for cid in sorted(selected):
        c = by_id[cid]
        rng = client_rng(setup.seed, c.id, r, STREAM_TRAIN)
        if c.role == SYBIL:
            batch = poisons.get(c.owner)
            if batch is None:
                continue
            uploads.append(local_train(model, batch.dataset(), w, setup.train, rng))
            sizes.append(len(batch) * attack.sybil_weight)
        elif len(c.dataset):
            uploads.append(local_train(model, c.dataset, w, setup.train, rng))
            sizes.append(len(c.dataset))

    new_params = aggregate(uploads, sizes) if uploads else w.copy()
    history = list(state.history)
    if setup.evaluator is not None:
        history.append(setup.evaluator(new_params, r))
    return replace(state, round=r + 1, params=new_params, history=history, last_poison=last_poison)


def run(state: FederationState, setup: Setup, rounds: int, attack=None, progress=None) -> FederationState:
    for _ in range(rounds):
        state = run_round(state, setup, attack)
        if progress is not None:
            progress(state)
    return state
