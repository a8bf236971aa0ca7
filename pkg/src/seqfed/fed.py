"""Server side of the federated loop: ID bank, client sampling, broadcast,
collection, and per-segment-position weighted aggregation of sub-networks.

Chains are sampled atomically: a chain participates in a round iff its
position-1 client is selected, in which case its partner clients join too.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import cells, split
from .cells import CellKind, SubNetworkParams
from .split import ClientEndpoint, SegmentBatch, sl_train_batch

log = logging.getLogger(__name__)


class IdBank:
    """Registry of sample ids and, per sample, the ordered client list holding
    its segments. Only ids cross this interface."""

    def __init__(self):
        self.sample_ids: set = set()
        self.segment_map: dict = {}

    def register_segment(self, sample_id, client_id) -> int:
        """Register that `client_id` holds the next segment of `sample_id`;
        returns the segment position (1-based)."""
        if sample_id not in self.sample_ids:
            self.sample_ids.add(sample_id)
            self.segment_map[sample_id] = [client_id]
            return 1
        self.segment_map[sample_id].append(client_id)
        return len(self.segment_map[sample_id])


@dataclass
class RoundConfig:
    n_clients: int
    frac: float
    batch_size: int
    epochs: int
    lr: float
    rounds: int
    n_segments: int
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.frac <= 1):
            raise ValueError(f"participation fraction must be in (0, 1], got {self.frac}")
        for name in ("n_clients", "batch_size", "epochs", "n_segments"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")


@dataclass
class ClientUpdate:
    client_id: int
    position: int
    params: SubNetworkParams
    n_segments_trained: int


@dataclass
class Chain:
    """One split-learning chain: S consecutive clients and their local samples
    (sample_id, per-position segment arrays, label)."""
    index: int
    endpoints: list[ClientEndpoint]
    samples: list = field(default_factory=list)


def init_global_model(kind: CellKind, input_dim: int, hidden_dim: int,
                      output_dim: int, n_segments: int, seed: int
                      ) -> list[SubNetworkParams]:
    return [cells.init_params(kind, input_dim, hidden_dim, output_dim,
                              seed=seed + s, position=s, total_segments=n_segments)
            for s in range(1, n_segments + 1)]


def build_chains(n_clients: int, n_segments: int,
                 model: list[SubNetworkParams]) -> list[Chain]:
    if n_clients % n_segments != 0:
        raise ValueError(f"{n_clients} clients cannot form chains of {n_segments}")
    chains = []
    for c in range(n_clients // n_segments):
        eps = [ClientEndpoint(c * n_segments + s - 1, s, model[s - 1].copy())
               for s in range(1, n_segments + 1)]
        chains.append(Chain(c, eps))
    return chains


def select_clients(n_clients: int, frac: float, rng: np.random.Generator) -> set:
    """Uniform sample without replacement of size max(round(frac*K), 1)."""
    m = max(int(np.floor(frac * n_clients + 0.5)), 1)
    return {int(i) for i in rng.choice(n_clients, size=m, replace=False)}


def broadcast(model: list[SubNetworkParams], clients) -> None:
    """Each client receives a deep copy of the sub-network for its position."""
    for client in clients:
        if not 1 <= client.position <= len(model):
            raise ValueError(f"client {client.client_id} has unknown position "
                             f"{client.position}")
        client.params = model[client.position - 1].copy()


def aggregate(updates: list[ClientUpdate], position: int,
              previous: SubNetworkParams | None = None) -> SubNetworkParams:
    """Weighted mean of position-s updates, weights n_s^k / n_s, summed in
    ascending client-id order. With no contributions the previous sub-network
    is retained."""
    mine = sorted((u for u in updates if u.position == position),
                  key=lambda u: u.client_id)
    total = sum(u.n_segments_trained for u in mine)
    if total == 0:
        if previous is None:
            raise ValueError(f"no updates and no previous model for position {position}")
        log.warning("position %d received no segments; retaining previous model",
                    position)
        return previous.copy()
    out = mine[0].params.copy()
    for name in out.buffers:
        acc = np.zeros_like(out.buffers[name])
        for u in mine:
            if u.params.buffers[name].shape != acc.shape:
                raise ValueError(f"shape mismatch on {name} from client {u.client_id}")
            acc += (u.n_segments_trained / total) * u.params.buffers[name]
        out.buffers[name] = acc
    return out


def make_batches(samples, batch_size: int, rng: np.random.Generator
                 ) -> list[SegmentBatch]:
    order = rng.permutation(len(samples))
    batches = []
    for lo in range(0, len(samples), batch_size):
        chunk = [samples[int(i)] for i in order[lo:lo + batch_size]]
        ids = [sid for sid, _, _ in chunk]
        n_positions = len(chunk[0][1])
        segs = [np.stack([pieces[s] for _, pieces, _ in chunk])
                for s in range(n_positions)]
        labels = np.array([lab for _, _, lab in chunk])
        batches.append(SegmentBatch(ids, segs, labels))
    return batches


def run_round(t: int, model: list[SubNetworkParams], cfg: RoundConfig,
              chains: list[Chain], sample_rng: np.random.Generator,
              trace=None) -> tuple[list[SubNetworkParams], float | None]:
    """One communication round: select -> broadcast -> local split training
    over `epochs` local epochs -> collect -> aggregate per position.

    Returns (new model, mean train loss over participating chains), or the
    unchanged model and None when no complete chain was selected.
    """
    selected = select_clients(cfg.n_clients, cfg.frac, sample_rng)
    active = [ch for ch in chains if ch.endpoints[0].client_id in selected
              and ch.samples]
    if not active:
        log.warning("round %d: no complete chain selected; skipping", t)
        return model, None
    updates = []
    losses = []
    for chain in active:
        broadcast(model, chain.endpoints)
        for epoch in range(cfg.epochs):
            rng = np.random.default_rng([cfg.seed, t, chain.index, epoch])
            for batch in make_batches(chain.samples, cfg.batch_size, rng):
                losses.append(sl_train_batch(chain.endpoints, batch, cfg.lr,
                                             round_idx=t, trace=trace))
        for ep_ in chain.endpoints:
            updates.append(ClientUpdate(ep_.client_id, ep_.position,
                                        ep_.params.copy(), len(chain.samples)))
    new_model = [aggregate(updates, s, previous=model[s - 1])
                 for s in range(1, cfg.n_segments + 1)]
    return new_model, float(np.mean(losses))


def chain_forward(model: list[SubNetworkParams], segments: list[np.ndarray]
                  ) -> np.ndarray:
    """Inference with the aggregated sub-networks chained in training order."""
    state = cells.zero_state(model[0].kind, segments[0].shape[0],
                             model[0].hidden_dim)
    for s, params in enumerate(model):
        state, _ = cells.forward_segment(params, state, segments[s])
    return cells.output_forward(model[-1], state)


def run_training(model: list[SubNetworkParams], cfg: RoundConfig,
                 chains: list[Chain], evaluate, on_row=None, trace=None,
                 checkpoint_every: int | None = None, checkpoint_dir=None):
    """Run cfg.rounds rounds; after each, evaluate the aggregated model on the
    held-out set. Returns (rows, final model) where each row is
    (round, train_loss, test_metric, elapsed_ms)."""
    sample_rng = np.random.default_rng([cfg.seed, 104729])
    rows = []
    last_loss = 0.0
    start = time.perf_counter()
    for t in range(1, cfg.rounds + 1):
        model, loss = run_round(t, model, cfg, chains, sample_rng, trace=trace)
        if loss is None:
            loss = last_loss
        last_loss = loss
        metric = evaluate(model)
        elapsed_ms = (time.perf_counter() - start) * 1000.0
        row = (t, loss, metric, elapsed_ms)
        rows.append(row)
        if on_row:
            on_row(row)
        if checkpoint_every and t % checkpoint_every == 0:
            from . import serialize
            for s, params in enumerate(model, start=1):
                serialize.save_params(
                    params, f"{checkpoint_dir}/round{t:04d}_pos{s}.bin")
    return rows, model
