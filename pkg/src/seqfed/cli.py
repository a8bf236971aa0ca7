"""Command-line entry point.

Subcommands:
  train        run one training mode and stream per-round metrics to CSV
  gradcheck    finite-difference verification of all cells and the chained
               protocol gradient; exits nonzero on any violation
  inspect-idx  print IDX file header fields
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import data, fed, gradcheck, harness, split
from .cells import CellKind

_CELLS = {k.value: k for k in CellKind}


def _add_train_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file supplying any flag; "
                                    "explicit CLI flags win")
    p.add_argument("--mode", choices=harness.MODES, default="fedsl")
    p.add_argument("--cell", choices=sorted(_CELLS), default="gru")
    p.add_argument("--dataset", choices=harness.DATASETS, default="synthetic")
    p.add_argument("--data-dir")
    p.add_argument("--segments", type=int, default=None,
                   help="segment count S (default: 1 for centralized/fedavg, 2 otherwise)")
    p.add_argument("--segment-lengths",
                   help="explicit comma-separated per-segment step counts")
    p.add_argument("--clients", type=int, default=10)
    p.add_argument("--frac", type=float, default=1.0)
    p.add_argument("--rounds", type=int, default=10)
    p.add_argument("--bs", type=int, default=8)
    p.add_argument("--ep", type=int, default=1)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--partition", choices=("iid", "noniid"), default="iid")
    p.add_argument("--shards-per-client", type=int, default=2)
    p.add_argument("--metric", choices=("accuracy", "auc"), default="accuracy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init-seed", type=int)
    p.add_argument("--sample-seed", type=int)
    p.add_argument("--data-seed", type=int)
    p.add_argument("--out", help="metrics CSV path")
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--checkpoint-dir", default=".")
    p.add_argument("--trace-messages", help="log all inter-client traffic here")
    p.add_argument("--limit-train", type=int)
    p.add_argument("--limit-test", type=int)
    p.add_argument("--synth-n", type=int, default=600)
    p.add_argument("--synth-tau", type=int, default=16)
    p.add_argument("--synth-features", type=int, default=4)
    p.add_argument("--synth-gap", type=float, default=3.0)
    p.add_argument("--synth-noise", type=float, default=1.0)


def _load_config_defaults(parser, argv):
    pre, _ = parser.parse_known_args(argv)
    cfg_path = getattr(pre, "config", None)
    if not cfg_path:
        return
    defaults = {}
    with open(cfg_path) as f:
        for raw in f:
            line = raw.split("#")[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            dest = key.strip().replace("-", "_")
            action = next((a for a in parser._actions if a.dest == dest), None)
            if action is None:
                raise SystemExit(f"unknown config key {key.strip()!r}")
            if action.type:
                value = action.type(value.strip())
            else:
                value = value.strip()
            defaults[dest] = value
    parser.set_defaults(**defaults)


def _spec_from_args(args) -> harness.RunSpec:
    segments = args.segments
    if segments is None:
        segments = 1 if args.mode in ("centralized", "fedavg") else 2
    override = None
    if args.segment_lengths:
        override = [int(v) for v in args.segment_lengths.split(",")]
    return harness.RunSpec(
        mode=args.mode, cell=_CELLS[args.cell], dataset=args.dataset,
        data_dir=args.data_dir, n_segments=segments,
        segment_length_override=override, n_clients=args.clients,
        frac=args.frac, rounds=args.rounds, batch_size=args.bs,
        epochs=args.ep, lr=args.lr, hidden_dim=args.hidden,
        partition=args.partition, shards_per_client=args.shards_per_client,
        metric=args.metric, seed=args.seed, init_seed=args.init_seed,
        sample_seed=args.sample_seed, data_seed=args.data_seed, out=args.out,
        checkpoint_every=args.checkpoint_every,
        checkpoint_dir=args.checkpoint_dir,
        trace_messages=args.trace_messages, limit_train=args.limit_train,
        limit_test=args.limit_test, synth_n=args.synth_n,
        synth_tau=args.synth_tau, synth_features=args.synth_features,
        synth_gap=args.synth_gap, synth_noise=args.synth_noise)


def _cmd_train(args) -> int:
    spec = _spec_from_args(args)
    try:
        spec.validate()
    except ValueError as exc:
        print(f"invalid run spec: {exc}", file=sys.stderr)
        return 2
    try:
        rows, _ = harness.run(spec, on_row=lambda r: print(harness.format_row(r)))
    except FileNotFoundError as exc:
        print(f"data missing: {exc}", file=sys.stderr)
        return 1
    return 0


def _chained_gradient_check(report) -> bool:
    """Directional finite-difference check of the relayed gradient through an
    S=2 chain, per cell kind."""
    from . import cells, linalg
    ok = True
    for kind in CellKind:
        rng = np.random.default_rng(hash(kind.value) % (2**32))
        b, tau, nf, hid = 2, 3, 2, 3
        p1 = cells.init_params(kind, nf, hid, 3, seed=1, position=1, total_segments=2)
        p2 = cells.init_params(kind, nf, hid, 3, seed=2, position=2, total_segments=2)
        seg1 = rng.normal(size=(b, tau, nf))
        seg2 = rng.normal(size=(b, tau, nf))
        labels = rng.integers(0, 3, size=b)
        c1 = split.ClientEndpoint(0, 1, p1)
        c2 = split.ClientEndpoint(1, 2, p2)
        msg = split.upstream_forward(c1, "k", seg1, [0, 1], 0)
        h_in = msg.state.h
        grad_msg, _, _ = split.downstream_train_step(
            c2, seg2, labels, [0, 1], 0, msg, lr=0.0)

        def loss():
            st = cells.RecurrentState(h_in, msg.state.c)
            state, _ = cells.forward_segment(p2, st, seg2)
            logits = cells.output_forward(p2, state)
            return linalg.softmax_cross_entropy(logits, labels)[0]

        numeric = gradcheck.fd_gradient(loss, h_in)
        passed = gradcheck.within_tol(grad_msg.grad_state.h, numeric)
        report(f"{'PASS' if passed else 'FAIL'} chained {kind.value}: "
               f"state-gradient dev "
               f"{float(np.max(np.abs(grad_msg.grad_state.h - numeric))):.3e}")
        ok = ok and passed
    return ok


def _cmd_gradcheck(args) -> int:
    ok = gradcheck.run_gradcheck(n_seeds=args.seeds, report=print)
    ok = _chained_gradient_check(print) and ok
    print("gradcheck:", "PASS" if ok else "FAIL")
    return 0 if ok else 1


def _cmd_inspect_idx(args) -> int:
    try:
        magic, dims = data.read_idx_header(args.path)
    except (OSError, ValueError) as exc:
        print(f"cannot read IDX header: {exc}", file=sys.stderr)
        return 1
    print(f"magic: {magic}")
    print(f"dims: {'x'.join(str(d) for d in dims)}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="seqfed")
    sub = parser.add_subparsers(dest="command", required=True)

    train_p = sub.add_parser("train", help="run one training mode")
    _add_train_args(train_p)
    train_p.set_defaults(fn=_cmd_train)

    gc_p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    gc_p.add_argument("--seeds", type=int, default=20)
    gc_p.set_defaults(fn=_cmd_gradcheck)

    idx_p = sub.add_parser("inspect-idx", help="print IDX header fields")
    idx_p.add_argument("path")
    idx_p.set_defaults(fn=_cmd_inspect_idx)

    argv = sys.argv[1:] if argv is None else list(argv)
    if argv and argv[0] == "train":
        _load_config_defaults(train_p, argv[1:])
    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
