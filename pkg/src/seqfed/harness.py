"""Run configuration and orchestration for the four training modes
(centralized, split-only, federated averaging, federated split), plus the
evaluation metrics and CSV emission they share.

All four modes run through the same federated engine:
  centralized = one client, one segment;   sl = one chain of S clients;
  fedavg = K clients, one segment;         fedsl = K clients, S segments.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import data, fed
from .cells import CellKind
from .data import ConfigurationError

MODES = ("centralized", "sl", "fedavg", "fedsl")
DATASETS = ("mnist-pixel", "mnist-row", "fashion-row", "synthetic")
CSV_HEADER = "round,train_loss,test_metric,elapsed_ms"


@dataclass
class RunSpec:
    mode: str = "fedsl"
    cell: CellKind = CellKind.GRU
    dataset: str = "synthetic"
    data_dir: str | None = None
    n_segments: int = 2
    segment_length_override: list[int] | None = None
    n_clients: int = 10
    frac: float = 1.0
    rounds: int = 10
    batch_size: int = 8
    epochs: int = 1
    lr: float = 0.05
    hidden_dim: int = 16
    partition: str = "iid"
    shards_per_client: int = 2
    metric: str = "accuracy"
    seed: int = 0
    init_seed: int | None = None
    sample_seed: int | None = None
    data_seed: int | None = None
    out: str | None = None
    checkpoint_every: int | None = None
    checkpoint_dir: str = "."
    trace_messages: str | None = None
    limit_train: int | None = None
    limit_test: int | None = None
    synth_n: int = 600
    synth_tau: int = 16
    synth_features: int = 4
    synth_gap: float = 3.0
    synth_noise: float = 1.0

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.dataset not in DATASETS:
            raise ConfigurationError(f"unknown dataset {self.dataset!r}")
        if self.partition not in ("iid", "noniid"):
            raise ConfigurationError(f"unknown partition {self.partition!r}")
        if self.metric not in ("accuracy", "auc"):
            raise ConfigurationError(f"unknown metric {self.metric!r}")
        if self.mode == "fedavg" and self.n_segments != 1:
            raise ConfigurationError("fedavg trains unsplit models; --segments must be 1")
        if self.mode == "fedsl" and self.n_segments < 2:
            raise ConfigurationError("fedsl requires --segments >= 2")
        if self.mode == "centralized" and self.n_segments != 1:
            raise ConfigurationError("centralized mode uses the whole sequence; "
                                     "--segments must be 1")

    def effective_topology(self) -> tuple[int, float]:
        """(n_clients, frac) after applying mode constraints; centralized and
        sl ignore the client-count and participation flags."""
        if self.mode == "centralized":
            return 1, 1.0
        if self.mode == "sl":
            return self.n_segments, 1.0
        return self.n_clients, self.frac

    def seeds(self) -> tuple[int, int, int]:
        init = self.seed if self.init_seed is None else self.init_seed
        sample = self.seed if self.sample_seed is None else self.sample_seed
        dat = self.seed if self.data_seed is None else self.data_seed
        return init, sample, dat


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Argmax match rate; ties resolve toward the lower class index."""
    logits = np.atleast_2d(np.asarray(logits))
    labels = np.asarray(labels)
    if logits.shape[0] == 0:
        raise ValueError("empty batch")
    if logits.shape[1] == 1:
        pred = (logits.reshape(-1) > 0).astype(int)
    else:
        pred = np.argmax(logits, axis=1)
    return float(np.mean(pred == labels))


def auc_roc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-based (Mann-Whitney) AUC with ties counted as half."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    pos = labels == 1
    n1, n0 = int(pos.sum()), int((~pos).sum())
    if n1 == 0 or n0 == 0:
        raise ValueError("AUC undefined with a single class present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    rank_sum = ranks[pos].sum()
    return float((rank_sum - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def format_row(row) -> str:
    t, loss, metric, ms = row
    return f"{t},{loss:.6f},{metric:.6f},{ms:.6f}"


def write_csv(rows, path) -> None:
    with open(path, "w") as f:
        f.write(CSV_HEADER + "\n")
        for row in rows:
            f.write(format_row(row) + "\n")


def read_csv(path):
    rows = []
    with open(path) as f:
        header = next(f).strip()
        if header != CSV_HEADER:
            raise ConfigurationError(f"unexpected CSV header {header!r}")
        for line in f:
            t, loss, metric, ms = line.strip().split(",")
            rows.append((int(t), float(loss), float(metric), float(ms)))
    return rows


_IDX_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find_idx(data_dir: str, name: str) -> str:
    for cand in (name, name + ".gz"):
        path = os.path.join(data_dir, cand)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(f"no {name}[.gz] under {data_dir}")


def load_dataset(spec: RunSpec) -> tuple[list, list, int, int]:
    """Returns (train records, test records, n_features, n_classes_or_1)."""
    if spec.dataset == "synthetic":
        ds = data.synth_binary_task(spec.synth_n, spec.synth_tau,
                                    spec.synth_features, spec.synth_gap,
                                    seed=spec.seeds()[2], noise=spec.synth_noise)
        train, test = ds.train, ds.test
        n_features, out_dim = spec.synth_features, 1
    else:
        if spec.data_dir is None:
            raise FileNotFoundError("--data-dir required for IDX datasets")
        to_seq = (data.to_pixel_sequence if spec.dataset == "mnist-pixel"
                  else data.to_row_sequence)
        train, test = [], []
        next_id = 0
        for split_name, bucket in (("train", train), ("test", test)):
            images, labels = data.load_idx(
                _find_idx(spec.data_dir, _IDX_NAMES[split_name][0]),
                _find_idx(spec.data_dir, _IDX_NAMES[split_name][1]))
            for img, lab in zip(images, labels):
                bucket.append(to_seq(img, sample_id=next_id, label=int(lab)))
                next_id += 1
        n_features = 1 if spec.dataset == "mnist-pixel" else 28
        out_dim = 10
    if spec.limit_train:
        train = train[:spec.limit_train]
    if spec.limit_test:
        test = test[:spec.limit_test]
    return train, test, n_features, out_dim


def _split_test_segments(records, lengths):
    feats = np.stack([r.features for r in records])
    labels = np.array([r.label for r in records])
    cuts = np.concatenate([[0], np.cumsum(lengths)]).astype(int)
    segs = [feats[:, cuts[s]:cuts[s + 1], :] for s in range(len(lengths))]
    return segs, labels


def make_evaluator(test_records, lengths, metric: str, eval_batch: int = 256):
    segs, labels = _split_test_segments(test_records, lengths)
    n = len(test_records)

    def evaluate(model) -> float:
        chunks = []
        for lo in range(0, n, eval_batch):
            chunks.append(fed.chain_forward(
                model, [s[lo:lo + eval_batch] for s in segs]))
        logits = np.concatenate(chunks)
        if metric == "auc":
            if logits.shape[1] != 1:
                raise ConfigurationError("AUC metric needs a binary (1-logit) head")
            return auc_roc(logits.reshape(-1), labels)
        return accuracy(logits, labels)

    return evaluate


def run(spec: RunSpec, on_row=None):
    """Execute one training run; returns (metrics rows, final global model)."""
    spec.validate()
    init_seed, sample_seed, data_seed = spec.seeds()
    n_clients, frac = spec.effective_topology()
    train, test, n_features, out_dim = load_dataset(spec)
    if not train or not test:
        raise ConfigurationError("empty train or test split")
    tau = train[0].features.shape[0]
    lengths = data.segment_lengths(tau, spec.n_segments,
                                   spec.segment_length_override)

    model = fed.init_global_model(spec.cell, n_features, spec.hidden_dim,
                                  out_dim, spec.n_segments, init_seed)
    if spec.partition == "iid" or n_clients == 1:
        partition = data.partition_iid(train, n_clients, data_seed)
    else:
        partition = data.partition_noniid_shards(train, n_clients,
                                                 spec.shards_per_client, data_seed)
    bank = fed.IdBank()
    _, chain_data = data.assign_segments(train, partition, spec.n_segments,
                                         lengths, bank)
    chains = fed.build_chains(n_clients, spec.n_segments, model)
    for chain in chains:
        chain.samples = chain_data[chain.index]

    cfg = fed.RoundConfig(n_clients=n_clients, frac=frac,
                          batch_size=spec.batch_size, epochs=spec.epochs,
                          lr=spec.lr, rounds=spec.rounds,
                          n_segments=spec.n_segments, seed=sample_seed)
    evaluate = make_evaluator(test, lengths, spec.metric)

    out_file = open(spec.out, "w") if spec.out else None
    trace_file = open(spec.trace_messages, "w") if spec.trace_messages else None
    trace = None
    if trace_file:
        def trace(line):
            trace_file.write(line + "\n")
    try:
        if out_file:
            out_file.write(CSV_HEADER + "\n")
            out_file.flush()

        def emit(row):
            if out_file:
                out_file.write(format_row(row) + "\n")
                out_file.flush()
            if on_row:
                on_row(row)

        rows, model = fed.run_training(model, cfg, chains, evaluate, on_row=emit,
                                       trace=trace,
                                       checkpoint_every=spec.checkpoint_every,
                                       checkpoint_dir=spec.checkpoint_dir)
    finally:
        if out_file:
            out_file.close()
        if trace_file:
            trace_file.close()
    return rows, model
