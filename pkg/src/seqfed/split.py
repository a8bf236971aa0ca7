"""Client-to-client split training over a chain of sub-networks.

One mini-batch flows forward through the chain as activation messages (the
final recurrent state of each segment) and backward as gradient messages (the
loss gradient with respect to that state). Raw segment data, labels, and
parameter buffers never cross a client boundary; the message codec exists so
that a run's full traffic can be logged and audited.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import cells, linalg
from .cells import CellKind, RecurrentState, SubNetworkParams


class ProtocolError(RuntimeError):
    """Violation of the chain protocol (misrouted, stale, or malformed message)."""


@dataclass
class ActivationMsg:
    sample_ids: list
    segment_position: int
    round_idx: int
    state: RecurrentState


@dataclass
class GradientMsg:
    sample_ids: list
    segment_position: int
    round_idx: int
    grad_state: RecurrentState


@dataclass
class SegmentBatch:
    """One mini-batch: per-position stacked segments plus labels for the tail."""
    sample_ids: list
    segments: list  # segments[s-1]: (batch, tau_s, input_dim)
    labels: np.ndarray


@dataclass
class ClientEndpoint:
    client_id: int
    position: int
    params: SubNetworkParams
    tapes: dict = field(default_factory=dict)
    version: int = 0


def _encode_state(state: RecurrentState):
    parts = [("h", state.h)]
    if state.c is not None:
        parts.append(("c", state.c))
    return parts


def encode_message(msg) -> str:
    """One message per line, fixed field order; floats via repr (round-trip exact)."""
    kind = "ACT" if isinstance(msg, ActivationMsg) else "GRAD"
    state = msg.state if kind == "ACT" else msg.grad_state
    parts = _encode_state(state)
    shape = ";".join(f"{name}:{a.shape[0]}x{a.shape[1]}" for name, a in parts)
    payload = ",".join(repr(float(v)) for _, a in parts for v in a.reshape(-1))
    ids = ",".join(str(i) for i in msg.sample_ids)
    return (f"{kind}|round={msg.round_idx}|pos={msg.segment_position}"
            f"|ids={ids}|shape={shape}|payload={payload}")


def decode_message(line: str):
    try:
        kind, rnd, pos, ids, shape, payload = line.rstrip("\n").split("|")
        round_idx = int(rnd.removeprefix("round="))
        position = int(pos.removeprefix("pos="))
        sample_ids = [int(s) for s in ids.removeprefix("ids=").split(",") if s]
        values = np.array([float(v) for v in payload.removeprefix("payload=").split(",")])
        arrays = {}
        off = 0
        for part in shape.removeprefix("shape=").split(";"):
            name, dims = part.split(":")
            r, c = (int(d) for d in dims.split("x"))
            arrays[name] = values[off:off + r * c].reshape(r, c)
            off += r * c
    except (ValueError, IndexError) as exc:
        raise ProtocolError(f"malformed message line: {exc}") from exc
    state = RecurrentState(arrays["h"], arrays.get("c"))
    if kind == "ACT":
        return ActivationMsg(sample_ids, position, round_idx, state)
    if kind == "GRAD":
        return GradientMsg(sample_ids, position, round_idx, state)
    raise ProtocolError(f"unknown message type {kind!r}")


def _check_alignment(sample_ids, incoming_ids):
    if list(incoming_ids) != list(sample_ids):
        raise ProtocolError(f"sample-id misalignment: batch {sample_ids} "
                            f"vs message {incoming_ids}")


def upstream_forward(client: ClientEndpoint, batch_key, segment: np.ndarray,
                     sample_ids, round_idx: int,
                     incoming: ActivationMsg | None = None) -> ActivationMsg:
    """Forward one segment, cache the tape, emit the state for position s+1."""
    if client.position == 1:
        if incoming is not None:
            raise ProtocolError("first-segment client received an activation")
        state0 = cells.zero_state(client.params.kind, segment.shape[0],
                                  client.params.hidden_dim)
    else:
        if incoming is None:
            raise ProtocolError(f"position {client.position} needs an activation")
        _check_alignment(sample_ids, incoming.sample_ids)
        state0 = incoming.state
    state, tape = cells.forward_segment(client.params, state0, segment)
    if batch_key in client.tapes:
        raise ProtocolError(f"tape for batch {batch_key} already cached")
    client.tapes[batch_key] = tape
    return ActivationMsg(list(sample_ids), client.position, round_idx, state)


def _head_loss(params, logits, labels):
    if params.output_dim == 1:
        return linalg.sigmoid_binary_cross_entropy(logits, labels)
    return linalg.softmax_cross_entropy(logits, labels)


def downstream_train_step(client: ClientEndpoint, segment: np.ndarray,
                          labels, sample_ids, round_idx: int,
                          incoming: ActivationMsg, lr: float):
    """Final-segment step: forward + loss + local update, answer with the
    gradient w.r.t. the incoming state. Returns (GradientMsg, loss, logits)."""
    if not client.params.has_head:
        raise ProtocolError("downstream step routed to a client without the output head")
    if labels is None:
        raise ProtocolError("final-segment batch is missing labels")
    _check_alignment(sample_ids, incoming.sample_ids)
    if incoming.state.h.shape != (segment.shape[0], client.params.hidden_dim):
        raise ProtocolError("incoming state shape mismatch")
    state, tape = cells.forward_segment(client.params, incoming.state, segment)
    logits = cells.output_forward(client.params, state)
    loss, grad_logits = _head_loss(client.params, logits, labels)
    grad_tau = cells.zero_state(client.params.kind, segment.shape[0],
                                client.params.hidden_dim)
    grads, grad_state0 = cells.backward_segment(client.params, tape, grad_tau, grad_logits)
    cells.sgd_step(client.params, grads, lr)
    client.version += 1
    return (GradientMsg(list(sample_ids), client.position, round_idx, grad_state0),
            loss, logits)


def upstream_backward(client: ClientEndpoint, batch_key,
                      incoming: GradientMsg, lr: float) -> GradientMsg | None:
    """Apply the received state gradient; relay to position s-1 when it exists."""
    tape = client.tapes.pop(batch_key, None)
    if tape is None:
        raise ProtocolError(f"no cached tape for batch {batch_key} "
                            "(stale or duplicate gradient)")
    if incoming.grad_state.h.shape != tape.final.h.shape:
        raise ProtocolError("gradient shape mismatch with cached tape")
    grads, grad_state0 = cells.backward_segment(client.params, tape,
                                                incoming.grad_state, None)
    cells.sgd_step(client.params, grads, lr)
    client.version += 1
    if client.position > 1:
        return GradientMsg(list(incoming.sample_ids), client.position,
                           incoming.round_idx, grad_state0)
    return None


def sl_train_batch(chain: list[ClientEndpoint], batch: SegmentBatch, lr: float,
                   round_idx: int = 0, trace=None) -> float:
    """Run the full forward then backward chain for one mini-batch.

    Every client's parameters are updated exactly once. On a protocol error
    the whole chain is rolled back to its pre-batch parameters.
    """
    if [c.position for c in chain] != list(range(1, len(chain) + 1)):
        raise ProtocolError("chain endpoints must be ordered by segment position")
    if len(batch.segments) != len(chain):
        raise ProtocolError(f"batch has {len(batch.segments)} segment positions "
                            f"for a chain of {len(chain)}")
    snapshot = [(c, c.params.copy(), c.version) for c in chain]
    batch_key = (round_idx, tuple(batch.sample_ids))
    try:
        msg = None
        for client in chain[:-1]:
            msg = upstream_forward(client, batch_key,
                                   batch.segments[client.position - 1],
                                   batch.sample_ids, round_idx, msg)
            if trace:
                trace(encode_message(msg))
        tail = chain[-1]
        if len(chain) == 1:
            # degenerate S=1 chain: plain local training, no handoff
            msg = ActivationMsg(list(batch.sample_ids), 0, round_idx,
                                cells.zero_state(tail.params.kind,
                                                 batch.segments[0].shape[0],
                                                 tail.params.hidden_dim))
        grad_msg, loss, _ = downstream_train_step(
            tail, batch.segments[-1], batch.labels, batch.sample_ids,
            round_idx, msg, lr)
        for client in reversed(chain[:-1]):
            if trace:
                trace(encode_message(grad_msg))
            grad_msg = upstream_backward(client, batch_key, grad_msg, lr)
        return loss
    except ProtocolError:
        for client, saved, version in snapshot:
            client.params = saved
            client.version = version
            client.tapes.pop(batch_key, None)
        raise
