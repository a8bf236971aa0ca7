"""Central finite-difference oracle and the gradient-exactness suites.

The oracle never touches the analytic backward path: every probe recomputes
the loss with a fresh forward pass. The `seqfed gradcheck` CLI subcommand
runs these suites and exits nonzero on any violation.
"""

from __future__ import annotations

import numpy as np

from . import cells, linalg
from .cells import CellKind, RecurrentState

EPS = 1e-6
REL_TOL = 1e-5
ABS_FLOOR = 1e-8


def fd_gradient(loss_fn, arr: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Central differences of loss_fn() w.r.t. every scalar of arr (in place probes)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        lp = loss_fn()
        flat[i] = orig - eps
        lm = loss_fn()
        flat[i] = orig
        gflat[i] = (lp - lm) / (2.0 * eps)
    return grad


def within_tol(analytic: np.ndarray, numeric: np.ndarray,
               rel: float = REL_TOL, floor: float = ABS_FLOOR) -> bool:
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    return bool(np.all(diff <= np.maximum(floor, rel * scale)))


def _single_net_loss(params, state0, segment, labels) -> float:
    state, _ = cells.forward_segment(params, state0, segment)
    logits = cells.output_forward(params, state)
    loss, _ = linalg.softmax_cross_entropy(logits, labels)
    return loss


def _random_instance(kind: CellKind, seed: int,
                     input_dim=3, hidden_dim=4, output_dim=3, tau=5, batch=2):
    rng = np.random.default_rng(seed)
    params = cells.init_params(kind, input_dim, hidden_dim, output_dim,
                               seed=seed, position=1, total_segments=1)
    # randomize biases too, so their gradients are checked off the zero point
    for name, buf in params.buffers.items():
        if name.startswith("b_"):
            params.buffers[name] = rng.normal(0.0, 0.3, size=buf.shape)
    segment = rng.normal(0.0, 1.0, size=(batch, tau, input_dim))
    h0 = rng.normal(0.0, 0.5, size=(batch, hidden_dim))
    c0 = rng.normal(0.0, 0.5, size=(batch, hidden_dim)) if kind == CellKind.LSTM else None
    labels = rng.integers(0, output_dim, size=batch)
    return params, RecurrentState(h0, c0), segment, labels


def _relu_kink_nearby(params, state0, segment, margin=1e-4) -> bool:
    # finite differences are invalid within `margin` of the relu kink
    h = state0.h
    for t in range(segment.shape[1]):
        pre = (linalg.matmul(segment[:, t, :], params.buffers["w_xh"])
               + linalg.matmul(h, params.buffers["w_hh"]) + params.buffers["b_h"])
        if np.any(np.abs(pre) < margin):
            return True
        h = linalg.relu(pre)
    return False


def check_cell_gradients(kind: CellKind, seed: int) -> list[tuple[str, float, bool]]:
    """Compare every parameter gradient and the initial-state gradient of one
    random instance against the finite-difference oracle.

    Returns (target name, max abs deviation, passed) per checked buffer.
    """
    params, state0, segment, labels = _random_instance(kind, seed)
    if kind == CellKind.IRNN:
        bump = 0
        while _relu_kink_nearby(params, state0, segment):
            bump += 1
            params, state0, segment, labels = _random_instance(kind, seed + 7919 * bump)

    state, tape = cells.forward_segment(params, state0, segment)
    logits = cells.output_forward(params, state)
    _, grad_logits = linalg.softmax_cross_entropy(logits, labels)
    grad_tau = cells.zero_state(kind, segment.shape[0], params.hidden_dim)
    grads, grad_state0 = cells.backward_segment(params, tape, grad_tau, grad_logits)

    def loss():
        return _single_net_loss(params, state0, segment, labels)

    results = []
    for name, buf in params.buffers.items():
        numeric = fd_gradient(loss, buf)
        results.append((name, float(np.max(np.abs(grads[name] - numeric))),
                        within_tol(grads[name], numeric)))
    numeric_h0 = fd_gradient(loss, state0.h)
    results.append(("state0.h", float(np.max(np.abs(grad_state0.h - numeric_h0))),
                    within_tol(grad_state0.h, numeric_h0)))
    if kind == CellKind.LSTM:
        numeric_c0 = fd_gradient(loss, state0.c)
        results.append(("state0.c", float(np.max(np.abs(grad_state0.c - numeric_c0))),
                        within_tol(grad_state0.c, numeric_c0)))
    return results


def run_gradcheck(kinds=None, n_seeds: int = 20, report=None) -> bool:
    """Run the full gradient-exactness suite; True iff every check passes."""
    kinds = list(kinds) if kinds is not None else list(CellKind)
    ok = True
    for kind in kinds:
        worst = 0.0
        kind_ok = True
        for seed in range(n_seeds):
            for name, dev, passed in check_cell_gradients(kind, seed):
                worst = max(worst, dev)
                if not passed:
                    kind_ok = False
                    if report:
                        report(f"FAIL {kind.value} seed={seed} target={name} dev={dev:.3e}")
        if report:
            report(f"{'PASS' if kind_ok else 'FAIL'} {kind.value}: "
                   f"{n_seeds} seeds, worst abs deviation {worst:.3e}")
        ok = ok and kind_ok
    return ok
