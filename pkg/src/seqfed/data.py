"""Dataset ingestion and distribution: IDX image files, pixel/row
sequentialization, segment splitting, IID and label-shard partitioning,
chain assignment, and a synthetic binary sequence task whose label depends
on late time steps (so only the last segment's holder could infer it).
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .fed import IdBank

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049


class IdxFormatError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass
class SequenceRecord:
    sample_id: int
    features: np.ndarray  # (tau, F)
    label: int | None = None


@dataclass
class DatasetSplit:
    train: list[SequenceRecord]
    test: list[SequenceRecord]


@dataclass
class SegmentAssignment:
    sample_id: int
    parts: list[tuple[int, int, int, int]]  # (client_id, position, start_step, length)
    label_holder: int


def _open_maybe_gz(path):
    p = str(path)
    return gzip.open(p, "rb") if p.endswith(".gz") else open(p, "rb")


def read_idx_header(path):
    """(magic, dims) of an IDX file; validates the fixed magic prefix bytes."""
    with _open_maybe_gz(path) as f:
        magic = struct.unpack(">I", f.read(4))[0]
        if magic >> 8 != 0x08:  # 0x00 0x00 0x08 = unsigned byte payload
            raise IdxFormatError(f"not an unsigned-byte IDX file, magic={magic}")
        ndims = magic & 0xFF
        dims = struct.unpack(f">{ndims}I", f.read(4 * ndims))
    return magic, dims


def load_idx(images_path, labels_path):
    """Parse big-endian IDX image/label files; pixels scaled to [0, 1].

    Returns (images (n, 28, 28) float64, labels (n,) int64).
    """
    with _open_maybe_gz(images_path) as f:
        blob = f.read()
    if len(blob) < 4:
        raise IdxFormatError("image file truncated before magic")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != IDX_IMAGE_MAGIC:
        raise IdxFormatError(f"image file magic {magic}, expected {IDX_IMAGE_MAGIC}")
    if len(blob) < 16:
        raise IdxFormatError("image file truncated in header")
    n, rows, cols = struct.unpack(">III", blob[4:16])
    pixels = np.frombuffer(blob, dtype=np.uint8, offset=16)
    if pixels.size != n * rows * cols:
        raise IdxFormatError(f"image file truncated: {pixels.size} pixels "
                             f"for {n}x{rows}x{cols}")
    images = pixels.reshape(n, rows, cols).astype(np.float64) / 255.0

    with _open_maybe_gz(labels_path) as f:
        blob = f.read()
    if len(blob) < 8:
        raise IdxFormatError("label file truncated in header")
    magic, n_labels = struct.unpack(">II", blob[:8])
    if magic != IDX_LABEL_MAGIC:
        raise IdxFormatError(f"label file magic {magic}, expected {IDX_LABEL_MAGIC}")
    labels = np.frombuffer(blob, dtype=np.uint8, offset=8)
    if labels.size != n_labels:
        raise IdxFormatError("label file truncated")
    if n_labels != n:
        raise IdxFormatError(f"{n} images but {n_labels} labels")
    return images, labels.astype(np.int64)


def to_pixel_sequence(image: np.ndarray, sample_id: int = 0,
                      label: int | None = None) -> SequenceRecord:
    """Scan-line order, one pixel per step: (28, 28) -> (784, 1)."""
    return SequenceRecord(sample_id, np.asarray(image, dtype=np.float64).reshape(-1, 1),
                          label)


def to_row_sequence(image: np.ndarray, sample_id: int = 0,
                    label: int | None = None) -> SequenceRecord:
    """One image row per step: (28, 28) -> (28, 28)."""
    return SequenceRecord(sample_id, np.asarray(image, dtype=np.float64).copy(), label)


def segment_lengths(tau: int, n_segments: int, override=None) -> list[int]:
    """Per-position step counts; default rule gives the remainder to segment 1."""
    if n_segments < 1:
        raise ConfigurationError("need at least one segment")
    if override is not None:
        override = list(override)
        if len(override) != n_segments or any(v <= 0 for v in override):
            raise ConfigurationError(f"override must list {n_segments} positive lengths")
        if sum(override) != tau:
            raise ConfigurationError(f"override sums to {sum(override)}, expected {tau}")
        return override
    base = tau // n_segments
    if base < 1:
        raise ConfigurationError(f"cannot cut {tau} steps into {n_segments} segments")
    return [tau - (n_segments - 1) * base] + [base] * (n_segments - 1)


def partition_iid(records, n_clients: int, seed: int) -> list[list[int]]:
    """Shuffle and deal record indices round-robin; sizes differ by at most 1."""
    if n_clients > len(records):
        raise ConfigurationError(f"{n_clients} clients for {len(records)} records")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(records))
    return [sorted(int(i) for i in order[k::n_clients]) for k in range(n_clients)]


def partition_noniid_shards(records, n_clients: int, shards_per_client: int,
                            seed: int) -> list[list[int]]:
    """Label-sorted shard partitioning: sort by label, cut into
    n_clients * shards_per_client shards, deal shards at random."""
    n_shards = n_clients * shards_per_client
    if n_shards > len(records):
        raise ConfigurationError(f"{n_shards} shards for {len(records)} records")
    order = sorted(range(len(records)),
                   key=lambda i: (records[i].label, records[i].sample_id))
    size = len(records) // n_shards
    shards = [order[s * size:(s + 1) * size] for s in range(n_shards)]
    leftover = order[n_shards * size:]
    rng = np.random.default_rng(seed)
    shard_order = rng.permutation(n_shards)
    out = []
    for k in range(n_clients):
        mine = []
        for s in shard_order[k * shards_per_client:(k + 1) * shards_per_client]:
            mine.extend(shards[s])
        out.append(sorted(mine))
    # leftover records (when shards don't divide evenly) go round-robin
    for i, idx in enumerate(leftover):
        out[i % n_clients].append(idx)
    return [sorted(lst) for lst in out]


def assign_segments(records, partition: list[list[int]], n_segments: int,
                    lengths: list[int], bank: IdBank):
    """Split every record at the cumulative lengths and spread the pieces over
    its chain of consecutive clients, registering each piece with the ID bank.

    Chain c covers clients [c*S, (c+1)*S); a record partitioned to any member
    belongs to that chain. Returns (assignments, chain_data) where
    chain_data[c] is a list of (sample_id, [segment arrays], label).
    """
    n_clients = len(partition)
    if n_clients < n_segments or n_clients % n_segments != 0:
        raise ConfigurationError(f"{n_clients} clients cannot form chains of "
                                 f"{n_segments}")
    starts = np.concatenate([[0], np.cumsum(lengths)]).astype(int)
    assignments = []
    n_chains = n_clients // n_segments
    chain_data = [[] for _ in range(n_chains)]
    for client_id in range(n_clients):
        chain = client_id // n_segments
        for rec_idx in partition[client_id]:
            rec = records[rec_idx]
            if rec.features.shape[0] != starts[-1]:
                raise ConfigurationError(f"record {rec.sample_id} has "
                                         f"{rec.features.shape[0]} steps, "
                                         f"expected {starts[-1]}")
            parts = []
            pieces = []
            for s in range(1, n_segments + 1):
                holder = chain * n_segments + (s - 1)
                pos = bank.register_segment(rec.sample_id, holder)
                if pos != s:
                    raise ConfigurationError(
                        f"sample {rec.sample_id} already registered up to "
                        f"position {pos - 1}")
                lo, hi = starts[s - 1], starts[s]
                parts.append((holder, s, int(lo), int(hi - lo)))
                pieces.append(rec.features[lo:hi])
            assignments.append(SegmentAssignment(rec.sample_id, parts,
                                                 parts[-1][0]))
            chain_data[chain].append((rec.sample_id, pieces, rec.label))
    return assignments, chain_data


def synth_binary_task(n: int, tau: int, n_features: int, class_gap: float,
                      seed: int, noise: float = 1.0, positive_rate: float = 0.5,
                      test_frac: float = 0.25) -> DatasetSplit:
    """Class-conditional Gaussian sequences. The +/- class_gap/2 mean drift is
    injected only in the final quarter of time steps, so the label is decided
    by steps held by the last segment."""
    if class_gap < 0:
        raise ConfigurationError("class_gap must be nonnegative")
    rng = np.random.default_rng(seed)
    records = []
    drift_start = tau - max(1, tau // 4)
    for i in range(n):
        label = int(rng.random() < positive_rate)
        feats = rng.normal(0.0, noise, size=(tau, n_features))
        feats[drift_start:] += (class_gap / 2.0) * (1 if label == 1 else -1)
        records.append(SequenceRecord(i, feats, label))
    n_test = int(round(n * test_frac))
    return DatasetSplit(records[n_test:], records[:n_test])


def export_flat(records, path) -> None:
    """Flat text export: header line, then `id label tau F v1 v2 ...` per sample."""
    with open(path, "w") as f:
        f.write("sample_id label tau n_features features...\n")
        for rec in records:
            tau, nf = rec.features.shape
            label = -1 if rec.label is None else rec.label
            vals = " ".join(repr(float(v)) for v in rec.features.reshape(-1))
            f.write(f"{rec.sample_id} {label} {tau} {nf} {vals}\n")


def import_flat(path) -> list[SequenceRecord]:
    records = []
    with open(path) as f:
        next(f)
        for line in f:
            toks = line.split()
            sid, label, tau, nf = int(toks[0]), int(toks[1]), int(toks[2]), int(toks[3])
            feats = np.array([float(v) for v in toks[4:]]).reshape(tau, nf)
            records.append(SequenceRecord(sid, feats, None if label < 0 else label))
    return records
