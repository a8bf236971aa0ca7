"""Recurrent cells (vanilla RNN, IRNN, GRU, LSTM) with segment-scoped
forward/backward passes.

A forward pass over one segment records a tape; the backward pass replays it
and returns, besides the parameter gradients, the gradient with respect to the
segment's *initial* recurrent state. That initial-state gradient is exactly
what gets handed to the client holding the previous segment.

Gate conventions (locked by the finite-difference suite):
  GRU:  z = sig(xWxz + hWhz + bz), r = sig(xWxr + hWhr + br),
        n = tanh(xWxn + (r*h)Whn + bn), h' = (1-z)*n + z*h
  LSTM: i, f, o = sig(.), g = tanh(.), c' = f*c + i*g, h' = o*tanh(c')
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import linalg
from .linalg import matmul, apply_activation, activation_derivative, DimensionError


class CellKind(str, Enum):
    VANILLA_RNN = "rnn"
    IRNN = "irnn"
    GRU = "gru"
    LSTM = "lstm"


_GATES = {
    CellKind.VANILLA_RNN: ("h",),
    CellKind.IRNN: ("h",),
    CellKind.GRU: ("z", "r", "n"),
    CellKind.LSTM: ("i", "f", "g", "o"),
}

_RNN_ACT = {CellKind.VANILLA_RNN: "tanh", CellKind.IRNN: "relu"}


@dataclass
class RecurrentState:
    h: np.ndarray
    c: np.ndarray | None = None

    def copy(self) -> "RecurrentState":
        return RecurrentState(self.h.copy(), None if self.c is None else self.c.copy())


def zero_state(kind: CellKind, batch: int, hidden_dim: int) -> RecurrentState:
    h = np.zeros((batch, hidden_dim))
    c = np.zeros((batch, hidden_dim)) if kind == CellKind.LSTM else None
    return RecurrentState(h, c)


@dataclass
class SubNetworkParams:
    """Parameters of one split sub-network, at segment position `position`
    of `total_segments`. Only the final position carries the output head."""

    kind: CellKind
    input_dim: int
    hidden_dim: int
    output_dim: int
    position: int
    total_segments: int
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def has_head(self) -> bool:
        return "w_hy" in self.buffers

    def copy(self) -> "SubNetworkParams":
        return SubNetworkParams(
            self.kind, self.input_dim, self.hidden_dim, self.output_dim,
            self.position, self.total_segments,
            {k: v.copy() for k, v in self.buffers.items()},
        )


@dataclass
class SegmentTape:
    """Per-time-step caches needed by the backward pass."""

    kind: CellKind
    steps: list[dict]
    state0: RecurrentState
    final: RecurrentState

    def __len__(self) -> int:
        return len(self.steps)


def init_params(kind: CellKind, input_dim: int, hidden_dim: int, output_dim: int,
                seed: int, position: int, total_segments: int) -> SubNetworkParams:
    """Seeded initialization: input/output weights ~ U(-1/sqrt(fan_in), +),
    biases zero, IRNN recurrent weights = identity."""
    if min(input_dim, hidden_dim, output_dim, position, total_segments) < 1:
        raise DimensionError("dimensions and positions must be positive")
    if position > total_segments:
        raise DimensionError("segment position exceeds segment count")
    rng = np.random.default_rng(seed)
    bx = 1.0 / np.sqrt(input_dim)
    bh = 1.0 / np.sqrt(hidden_dim)
    buffers: dict[str, np.ndarray] = {}
    for gate in _GATES[kind]:
        buffers[f"w_x{gate}"] = rng.uniform(-bx, bx, size=(input_dim, hidden_dim))
        if kind == CellKind.IRNN:
            buffers[f"w_h{gate}"] = np.eye(hidden_dim)
        else:
            buffers[f"w_h{gate}"] = rng.uniform(-bh, bh, size=(hidden_dim, hidden_dim))
        buffers[f"b_{gate}"] = np.zeros(hidden_dim)
    if position == total_segments:
        buffers["w_hy"] = rng.uniform(-bh, bh, size=(hidden_dim, output_dim))
        buffers["b_y"] = np.zeros(output_dim)
    return SubNetworkParams(kind, input_dim, hidden_dim, output_dim,
                            position, total_segments, buffers)


def zero_grads(params: SubNetworkParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(buf) for name, buf in params.buffers.items()}


def _gate_preact(params, gate, x, h):
    b = params.buffers
    return matmul(x, b[f"w_x{gate}"]) + matmul(h, b[f"w_h{gate}"]) + b[f"b_{gate}"]


def forward_segment(params: SubNetworkParams, state0: RecurrentState,
                    segment: np.ndarray) -> tuple[RecurrentState, SegmentTape]:
    """Run the cell recurrence over one segment (batch, tau, input_dim)."""
    segment = np.asarray(segment, dtype=np.float64)
    if segment.ndim != 3 or segment.shape[2] != params.input_dim:
        raise DimensionError(f"segment shape {segment.shape} incompatible with "
                             f"input_dim {params.input_dim}")
    if state0.h.shape != (segment.shape[0], params.hidden_dim):
        raise DimensionError("state0 batch/hidden shape mismatch")
    kind = params.kind
    h = state0.h
    c = state0.c
    steps = []
    for t in range(segment.shape[1]):
        x = segment[:, t, :]
        if kind in (CellKind.VANILLA_RNN, CellKind.IRNN):
            z = _gate_preact(params, "h", x, h)
            h_new = apply_activation(z, _RNN_ACT[kind])
            steps.append({"x": x, "h_prev": h, "pre": z})
            h = h_new
        elif kind == CellKind.GRU:
            zg = linalg.sigmoid(_gate_preact(params, "z", x, h))
            rg = linalg.sigmoid(_gate_preact(params, "r", x, h))
            rh = rg * h
            n_pre = (matmul(x, params.buffers["w_xn"]) + matmul(rh, params.buffers["w_hn"])
                     + params.buffers["b_n"])
            ng = np.tanh(n_pre)
            h_new = (1.0 - zg) * ng + zg * h
            steps.append({"x": x, "h_prev": h, "z": zg, "r": rg, "n": ng, "rh": rh})
            h = h_new
        else:  # LSTM
            ig = linalg.sigmoid(_gate_preact(params, "i", x, h))
            fg = linalg.sigmoid(_gate_preact(params, "f", x, h))
            gg = np.tanh(_gate_preact(params, "g", x, h))
            og = linalg.sigmoid(_gate_preact(params, "o", x, h))
            c_new = fg * c + ig * gg
            tc = np.tanh(c_new)
            h_new = og * tc
            steps.append({"x": x, "h_prev": h, "c_prev": c,
                          "i": ig, "f": fg, "g": gg, "o": og, "tc": tc})
            h, c = h_new, c_new
    final = RecurrentState(h, None if c is None else c)
    return final, SegmentTape(kind, steps, state0.copy(), final.copy())


def output_forward(params: SubNetworkParams, state: RecurrentState) -> np.ndarray:
    """Logits from the output head; only the final-segment owner has one."""
    if not params.has_head:
        raise DimensionError(
            f"sub-network at position {params.position} has no output head; "
            "only the final-segment client owns labels and head")
    return matmul(state.h, params.buffers["w_hy"]) + params.buffers["b_y"]


def backward_segment(params: SubNetworkParams, tape: SegmentTape,
                     grad_state_tau: RecurrentState,
                     grad_logits: np.ndarray | None = None,
                     ) -> tuple[dict[str, np.ndarray], RecurrentState]:
    """Exact BPTT through the segment.

    Seeds the recursion with grad_state_tau (plus the head contribution when
    grad_logits is given) and returns (param grads, grad w.r.t. state0). For
    LSTM the state gradient carries both dL/dh0 and dL/dc0.
    """
    if tape.kind != params.kind:
        raise DimensionError("tape was recorded by a different cell kind")
    if (grad_logits is not None) != params.has_head:
        raise DimensionError("grad_logits must be supplied iff the output head exists")
    b = params.buffers
    grads = zero_grads(params)
    dh = grad_state_tau.h.copy()
    dc = None
    if params.kind == CellKind.LSTM:
        dc = (grad_state_tau.c.copy() if grad_state_tau.c is not None
              else np.zeros_like(dh))
    if grad_logits is not None:
        grads["w_hy"] += matmul(tape.final.h.T, grad_logits)
        grads["b_y"] += grad_logits.sum(axis=0)
        dh += matmul(grad_logits, b["w_hy"].T)

    kind = params.kind
    for step in reversed(tape.steps):
        x, h_prev = step["x"], step["h_prev"]
        if kind in (CellKind.VANILLA_RNN, CellKind.IRNN):
            dz = dh * activation_derivative(step["pre"], _RNN_ACT[kind])
            grads["w_xh"] += matmul(x.T, dz)
            grads["w_hh"] += matmul(h_prev.T, dz)
            grads["b_h"] += dz.sum(axis=0)
            dh = matmul(dz, b["w_hh"].T)
        elif kind == CellKind.GRU:
            zg, rg, ng = step["z"], step["r"], step["n"]
            dzg = dh * (h_prev - ng)
            dng = dh * (1.0 - zg)
            dh_prev = dh * zg
            dn_pre = dng * (1.0 - ng * ng)
            q = matmul(dn_pre, b["w_hn"].T)
            drg = q * h_prev
            dh_prev = dh_prev + q * rg
            dz_pre = dzg * zg * (1.0 - zg)
            dr_pre = drg * rg * (1.0 - rg)
            grads["w_xz"] += matmul(x.T, dz_pre)
            grads["w_hz"] += matmul(h_prev.T, dz_pre)
            grads["b_z"] += dz_pre.sum(axis=0)
            grads["w_xr"] += matmul(x.T, dr_pre)
            grads["w_hr"] += matmul(h_prev.T, dr_pre)
            grads["b_r"] += dr_pre.sum(axis=0)
            grads["w_xn"] += matmul(x.T, dn_pre)
            grads["w_hn"] += matmul(step["rh"].T, dn_pre)
            grads["b_n"] += dn_pre.sum(axis=0)
            dh = (dh_prev + matmul(dz_pre, b["w_hz"].T)
                  + matmul(dr_pre, b["w_hr"].T))
        else:  # LSTM
            ig, fg, gg, og, tc = step["i"], step["f"], step["g"], step["o"], step["tc"]
            c_prev = step["c_prev"]
            dog = dh * tc
            dct = dc + dh * og * (1.0 - tc * tc)
            dig = dct * gg
            dfg = dct * c_prev
            dgg = dct * ig
            dc = dct * fg
            di_pre = dig * ig * (1.0 - ig)
            df_pre = dfg * fg * (1.0 - fg)
            dg_pre = dgg * (1.0 - gg * gg)
            do_pre = dog * og * (1.0 - og)
            dh = np.zeros_like(dh)
            for gate, dpre in (("i", di_pre), ("f", df_pre), ("g", dg_pre), ("o", do_pre)):
                grads[f"w_x{gate}"] += matmul(x.T, dpre)
                grads[f"w_h{gate}"] += matmul(h_prev.T, dpre)
                grads[f"b_{gate}"] += dpre.sum(axis=0)
                dh = dh + matmul(dpre, b[f"w_h{gate}"].T)
    return grads, RecurrentState(dh, dc)


def sgd_step(params: SubNetworkParams, grads: dict[str, np.ndarray], lr: float) -> None:
    """In-place theta <- theta - lr * g on every buffer."""
    for name, buf in params.buffers.items():
        if grads[name].shape != buf.shape:
            raise DimensionError(f"gradient shape mismatch on {name}")
        buf -= lr * grads[name]
