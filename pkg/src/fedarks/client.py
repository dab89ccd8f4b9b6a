"""One client's local round: PK-sampled SGD on the dual-branch objective."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import (
    ClassifierHead,
    FusionConfig,
    ModelConfig,
    PartBranch,
    TripletConfig,
    forward_backward,
    global_layout,
)
from .params import LayoutError, ParamVector, l2_norm, subtract
from .synthdata import ClientShard, ConfigError


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss or parameter."""

    def __init__(self, message: str, client_id: int | None = None, round_: int | None = None):
        super().__init__(message)
        self.client_id = client_id
        self.round = round_


@dataclass(frozen=True)
class TrainConfig:
    local_epochs: int = 2
    batch_p: int = 4
    batch_s: int = 2
    learning_rate: float = 0.05
    seed: int = 7

    def __post_init__(self):
        if self.local_epochs < 1:
            raise ConfigError("local_epochs must be >= 1")
        if self.batch_p < 2 or self.batch_s < 2:
            raise ConfigError("PK batches need batch_p >= 2 and batch_s >= 2 for triplet mining")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative")

    @property
    def batch_size(self) -> int:
        return self.batch_p * self.batch_s


@dataclass(frozen=True, eq=False)
class LocalState:
    """What a client keeps between rounds: its part branch and classifier head."""

    part: PartBranch
    head: ClassifierHead


@dataclass(frozen=True, eq=False)
class ClientUpdate:
    client_id: int
    post_params: ParamVector
    update_norm: float
    local_loss_trace: list[float] = field(default_factory=list)

    @property
    def mean_loss(self) -> float:
        return float(np.mean(self.local_loss_trace)) if self.local_loss_trace else float("nan")


def client_rng(seed: int, client_id: int, round_: int) -> np.random.Generator:
    return np.random.default_rng([seed, client_id, round_])


def check_pk_feasible(labels, p: int, s: int) -> None:
    _, counts = np.unique(np.asarray(labels), return_counts=True)
    if int(np.sum(counts >= s)) < p:
        raise ConfigError(f"shard has fewer than {p} identities with >= {s} samples")


def pk_batch_sampler(labels, p: int, s: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Index batches for one epoch: ``p`` distinct identities x ``s`` samples each.

    Each identity's samples are shuffled and cut into chunks of ``s``
    (leftovers are dropped), so no sample appears twice within the epoch.
    Batches are formed from the identities with the most chunks remaining,
    with random tie-breaking, until fewer than ``p`` identities remain.
    """
    labels = np.asarray(labels)
    check_pk_feasible(labels, p, s)
    chunks: dict[int, list[np.ndarray]] = {}
    for ident in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == ident))
        n = len(idx) // s
        if n:
            chunks[int(ident)] = [idx[c * s : (c + 1) * s] for c in range(n)]
    batches = []
    while True:
        ready = [ident for ident, cs in chunks.items() if cs]
        if len(ready) < p:
            break
        order = rng.permutation(len(ready))
        ranked = sorted(order, key=lambda i: -len(chunks[ready[i]]))
        picked = [ready[i] for i in ranked[:p]]
        batches.append(np.concatenate([chunks[ident].pop() for ident in picked]))
    return batches


def local_labels(shard: ClientShard) -> tuple[np.ndarray, dict[int, int]]:
    """Map global identity labels onto 0..C_k-1 for the client's head."""
    idents = sorted({s.identity for s in shard.samples})
    mapping = {ident: k for k, ident in enumerate(idents)}
    return np.array([mapping[s.identity] for s in shard.samples], dtype=np.int64), mapping


def local_train(broadcast: ParamVector, state: LocalState, shard: ClientShard, cfg: TrainConfig,
                mc: ModelConfig, fc: FusionConfig, tc: TripletConfig,
                rng: np.random.Generator) -> tuple[ClientUpdate, LocalState]:
    """Train from the broadcast global branch and return the global-branch update.

    The part branch and head are updated in the returned :class:`LocalState`;
    only the global branch goes back to the server.
    """
    if broadcast.layout != global_layout(mc):
        raise LayoutError("broadcast parameters do not match the global-branch layout")
    if not shard.samples:
        return ClientUpdate(shard.client_id, broadcast, 0.0, []), state

    pixels = np.stack([s.pixels for s in shard.samples])
    labels, _ = local_labels(shard)
    num_classes = state.head.num_classes

    g = broadcast.values.copy()
    p = state.part.params.values.copy()
    h = state.head.params.values.copy()
    lr = cfg.learning_rate
    trace = []
    for _ in range(cfg.local_epochs):
        losses = []
        for batch in pk_batch_sampler(labels, cfg.batch_p, cfg.batch_s, rng):
            loss, _, grads, _ = forward_backward(g, p, h, pixels[batch], labels[batch], mc, fc, tc, num_classes)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite loss on client {shard.client_id}", shard.client_id)
            g -= lr * grads.global_
            p -= lr * grads.part
            h -= lr * grads.head
            losses.append(loss)
        trace.append(float(np.mean(losses)))

    post = ParamVector(g, broadcast.layout)
    if not post.is_finite():
        raise NumericalError(f"non-finite parameters on client {shard.client_id}", shard.client_id)
    update = ClientUpdate(shard.client_id, post, l2_norm(subtract(post, broadcast)), trace)
    new_state = LocalState(PartBranch(ParamVector(p, state.part.params.layout)),
                           ClassifierHead(ParamVector(h, state.head.params.layout)))
    return update, new_state
