import numpy as np
import pytest

from seqfed import cells, gradcheck, linalg, split
from seqfed.cells import CellKind, RecurrentState
from seqfed.split import (ActivationMsg, ClientEndpoint, GradientMsg,
                          ProtocolError, SegmentBatch, sl_train_batch)

from chainutil import (split_loss_and_grads, split_sequence, tied_chain,
                       unsplit_loss_and_grads)


def make_batch(rng, n_segments, batch=2, tau=4, nf=3, classes=3):
    ids = list(range(batch))
    segs = [rng.normal(size=(batch, tau, nf)) for _ in range(n_segments)]
    labels = rng.integers(0, classes, size=batch)
    return SegmentBatch(ids, segs, labels)


class TestUpstreamForward:
    def test_zero_weights_zero_activation(self):
        _, chain = tied_chain(CellKind.VANILLA_RNN, 2)
        for name in chain[0].params.buffers:
            chain[0].params.buffers[name][:] = 0.0
        seg = np.random.default_rng(0).normal(size=(2, 4, 3))
        msg = split.upstream_forward(chain[0], "k", seg, [0, 1], 0)
        assert np.all(msg.state.h == 0.0)

    def test_batch_dimension(self):
        _, chain = tied_chain(CellKind.GRU, 2)
        seg = np.zeros((2, 4, 3))
        msg = split.upstream_forward(chain[0], "k", seg, [5, 9], 0)
        assert msg.state.h.shape[0] == 2
        assert msg.sample_ids == [5, 9]

    def test_chain_replay_matches_unsplit_prefix(self):
        rng = np.random.default_rng(1)
        unsplit, chain = tied_chain(CellKind.LSTM, 2)
        full = rng.normal(size=(2, 8, 3))
        seg1 = full[:, :4, :]
        msg = split.upstream_forward(chain[0], "k", seg1, [0, 1], 0)
        ref_state, _ = cells.forward_segment(
            unsplit, cells.zero_state(unsplit.kind, 2, 4), seg1)
        assert np.array_equal(msg.state.h, ref_state.h)
        assert np.array_equal(msg.state.c, ref_state.c)

    def test_misalignment_rejected(self):
        _, chain = tied_chain(CellKind.GRU, 2)
        seg = np.zeros((2, 4, 3))
        msg = split.upstream_forward(chain[0], "k", seg, [0, 1], 0)
        msg.sample_ids = [1, 0]
        with pytest.raises(ProtocolError):
            split.upstream_forward(chain[1], "k", seg, [0, 1], 0, msg)


class TestDownstreamTrainStep:
    def test_uniform_loss_with_zero_weights(self):
        _, chain = tied_chain(CellKind.VANILLA_RNN, 2)
        tail = chain[1]
        for name in tail.params.buffers:
            tail.params.buffers[name][:] = 0.0
        seg = np.random.default_rng(0).normal(size=(2, 4, 3))
        incoming = ActivationMsg([0, 1], 1, 0, RecurrentState(np.zeros((2, 4))))
        _, loss, _ = split.downstream_train_step(tail, seg, np.array([0, 1]),
                                                 [0, 1], 0, incoming, lr=0.1)
        assert loss == pytest.approx(np.log(3), abs=1e-12)

    def test_zero_lr_leaves_params_but_emits_gradient(self):
        rng = np.random.default_rng(2)
        _, chain = tied_chain(CellKind.GRU, 2)
        tail = chain[1]
        before = {k: v.copy() for k, v in tail.params.buffers.items()}
        seg = rng.normal(size=(2, 4, 3))
        incoming = ActivationMsg([0, 1], 1, 0,
                                 RecurrentState(rng.normal(size=(2, 4))))
        grad_msg, _, _ = split.downstream_train_step(
            tail, seg, rng.integers(0, 3, size=2), [0, 1], 0, incoming, lr=0.0)
        for name in before:
            assert np.array_equal(tail.params.buffers[name], before[name])
        assert np.any(grad_msg.grad_state.h != 0.0)

    @pytest.mark.parametrize("kind", list(CellKind))
    def test_gradient_msg_matches_fd(self, kind):
        rng = np.random.default_rng(3)
        _, chain = tied_chain(kind, 2)
        tail = chain[1]
        seg = rng.normal(size=(2, 4, 3))
        labels = rng.integers(0, 3, size=2)
        h_in = rng.normal(size=(2, 4))
        c_in = rng.normal(size=(2, 4)) if kind == CellKind.LSTM else None
        incoming = ActivationMsg([0, 1], 1, 0, RecurrentState(h_in, c_in))
        grad_msg, _, _ = split.downstream_train_step(
            tail, seg, labels, [0, 1], 0, incoming, lr=0.0)

        def loss():
            st, _ = cells.forward_segment(tail.params,
                                          RecurrentState(h_in, c_in), seg)
            logits = cells.output_forward(tail.params, st)
            return linalg.softmax_cross_entropy(logits, labels)[0]

        numeric = gradcheck.fd_gradient(loss, h_in)
        assert gradcheck.within_tol(grad_msg.grad_state.h, numeric)

    def test_missing_label_rejected(self):
        _, chain = tied_chain(CellKind.GRU, 2)
        incoming = ActivationMsg([0], 1, 0, RecurrentState(np.zeros((1, 4))))
        with pytest.raises(ProtocolError):
            split.downstream_train_step(chain[1], np.zeros((1, 4, 3)), None,
                                        [0], 0, incoming, lr=0.1)


class TestUpstreamBackward:
    def test_zero_gradient_noop_update(self):
        _, chain = tied_chain(CellKind.GRU, 2)
        head = chain[0]
        seg = np.random.default_rng(4).normal(size=(2, 4, 3))
        split.upstream_forward(head, "k", seg, [0, 1], 0)
        before = {k: v.copy() for k, v in head.params.buffers.items()}
        msg = GradientMsg([0, 1], 2, 0, RecurrentState(np.zeros((2, 4))))
        split.upstream_backward(head, "k", msg, lr=0.5)
        for name in before:
            assert np.array_equal(head.params.buffers[name], before[name])

    def test_duplicate_gradient_rejected(self):
        _, chain = tied_chain(CellKind.GRU, 2)
        seg = np.random.default_rng(4).normal(size=(2, 4, 3))
        split.upstream_forward(chain[0], "k", seg, [0, 1], 0)
        msg = GradientMsg([0, 1], 2, 0, RecurrentState(np.zeros((2, 4))))
        split.upstream_backward(chain[0], "k", msg, lr=0.1)
        with pytest.raises(ProtocolError):
            split.upstream_backward(chain[0], "k", msg, lr=0.1)

    def test_three_segment_relay_matches_fd(self):
        # gradient relayed to position 1 == fd of the end-to-end loss w.r.t.
        # the position-1 initial state
        rng = np.random.default_rng(5)
        _, chain = tied_chain(CellKind.VANILLA_RNN, 3)
        segs = [rng.normal(size=(2, 3, 3)) for _ in range(3)]
        labels = rng.integers(0, 3, size=2)
        h0 = rng.normal(size=(2, 4))

        # drive the protocol manually so position 1 starts from h0
        state, tape1 = cells.forward_segment(chain[0].params,
                                             RecurrentState(h0), segs[0])
        msg = ActivationMsg([0, 1], 1, 0, state)
        msg2 = split.upstream_forward(chain[1], "k", segs[1], [0, 1], 0, msg)
        grad_msg, _, _ = split.downstream_train_step(
            chain[2], segs[2], labels, [0, 1], 0, msg2, lr=0.0)
        relay = split.upstream_backward(chain[1], "k", grad_msg, lr=0.0)
        assert relay is not None and relay.segment_position == 2
        _, g0 = cells.backward_segment(chain[0].params, tape1,
                                       relay.grad_state, None)

        def loss():
            st = RecurrentState(h0)
            for p, seg in zip([c.params for c in chain], segs):
                st, _ = cells.forward_segment(p, st, seg)
            logits = cells.output_forward(chain[2].params, st)
            return linalg.softmax_cross_entropy(logits, labels)[0]

        numeric = gradcheck.fd_gradient(loss, h0)
        assert gradcheck.within_tol(g0.h, numeric)


class TestSlTrainBatch:
    def test_s1_equals_plain_local_step(self):
        rng = np.random.default_rng(6)
        unsplit, chain = tied_chain(CellKind.GRU, 1)
        batch = make_batch(rng, 1)
        loss = sl_train_batch(chain, batch, lr=0.1)
        ref_loss, ref_grads = unsplit_loss_and_grads(
            unsplit, batch.segments[0], batch.labels)
        assert loss == ref_loss
        cells.sgd_step(unsplit, ref_grads, 0.1)
        for name in unsplit.buffers:
            assert np.array_equal(chain[0].params.buffers[name],
                                  unsplit.buffers[name])

    @pytest.mark.parametrize("kind", list(CellKind))
    @pytest.mark.parametrize("n_segments", [2, 3])
    def test_tied_weights_unsplit_equivalence(self, kind, n_segments):
        rng = np.random.default_rng(7)
        unsplit, chain = tied_chain(kind, n_segments)
        full = rng.normal(size=(2, 4 * n_segments, 3))
        labels = rng.integers(0, 3, size=2)
        segs = split_sequence(full, [4] * n_segments)
        batch = SegmentBatch([0, 1], segs, labels)
        loss = sl_train_batch(chain, batch, lr=0.0)
        ref_loss, ref_grads = unsplit_loss_and_grads(unsplit, full, labels)
        assert abs(loss - ref_loss) <= 1e-12

        _, per_position = split_loss_and_grads(
            [c.params for c in chain], segs, labels)
        for name, ref in ref_grads.items():
            total = sum(g[name] for g in per_position if name in g)
            assert np.all(np.abs(total - ref)
                          <= 1e-9 * np.maximum(np.abs(ref), 1e-12) + 1e-15), name

    def test_deterministic_loss_sequence(self):
        losses = []
        for _ in range(2):
            rng = np.random.default_rng(8)
            _, chain = tied_chain(CellKind.GRU, 2)
            run = [sl_train_batch(chain, make_batch(rng, 2), lr=0.05,
                                  round_idx=i) for i in range(50)]
            losses.append(run)
        assert losses[0] == losses[1]

    def test_one_update_per_batch(self):
        rng = np.random.default_rng(9)
        _, chain = tied_chain(CellKind.GRU, 3)
        sl_train_batch(chain, make_batch(rng, 3), lr=0.05)
        assert [c.version for c in chain] == [1, 1, 1]
        sl_train_batch(chain, make_batch(rng, 3), lr=0.05, round_idx=1)
        assert [c.version for c in chain] == [2, 2, 2]

    def test_rollback_on_failure(self):
        rng = np.random.default_rng(10)
        _, chain = tied_chain(CellKind.GRU, 2)
        before = [{k: v.copy() for k, v in c.params.buffers.items()}
                  for c in chain]
        batch = make_batch(rng, 2)
        batch.labels = None  # protocol error at the tail
        with pytest.raises(ProtocolError):
            sl_train_batch(chain, batch, lr=0.5)
        for client, saved in zip(chain, before):
            assert client.version == 0
            for name in saved:
                assert np.array_equal(client.params.buffers[name], saved[name])

    def test_message_conservation(self):
        rng = np.random.default_rng(11)
        _, chain = tied_chain(CellKind.LSTM, 3)
        lines = []
        sl_train_batch(chain, make_batch(rng, 3), lr=0.05, trace=lines.append)
        acts = [l for l in lines if l.startswith("ACT")]
        grads = [l for l in lines if l.startswith("GRAD")]
        assert len(acts) == len(grads) == 2  # one per link


class TestCodec:
    def test_golden_encoding(self):
        msg = ActivationMsg([3, 4], 2, 1,
                            RecurrentState(np.array([[0.5, -1.0], [2.0, 0.25]])))
        line = split.encode_message(msg)
        assert line == "ACT|round=1|pos=2|ids=3,4|shape=h:2x2|payload=0.5,-1.0,2.0,0.25"

    def test_golden_gradient_with_cell_state(self):
        msg = GradientMsg([7], 1, 0,
                          RecurrentState(np.array([[1.0]]), np.array([[-2.0]])))
        line = split.encode_message(msg)
        assert line == "GRAD|round=0|pos=1|ids=7|shape=h:1x1;c:1x1|payload=1.0,-2.0"

    def test_round_trip_exact(self):
        rng = np.random.default_rng(12)
        msg = ActivationMsg([1, 2, 3], 1, 4,
                            RecurrentState(rng.normal(size=(3, 5)),
                                           rng.normal(size=(3, 5))))
        back = split.decode_message(split.encode_message(msg))
        assert isinstance(back, ActivationMsg)
        assert back.sample_ids == msg.sample_ids
        assert np.array_equal(back.state.h, msg.state.h)
        assert np.array_equal(back.state.c, msg.state.c)

    def test_malformed_line_rejected(self):
        with pytest.raises(ProtocolError):
            split.decode_message("ACT|round=x|nope")


class TestPrivacySurface:
    def test_traffic_contains_no_raw_data_or_params(self):
        rng = np.random.default_rng(13)
        _, chain = tied_chain(CellKind.GRU, 2)
        lines = []
        for i in range(5):
            sl_train_batch(chain, make_batch(rng, 2), lr=0.05, round_idx=i,
                           trace=lines.append)
        traffic = "\n".join(lines)
        assert traffic  # the run did produce inter-client messages
        # no raw segment value and no parameter scalar may appear in traffic
        rng = np.random.default_rng(13)
        for i in range(5):
            batch = make_batch(rng, 2)
            for seg in batch.segments:
                for v in seg.reshape(-1):
                    assert repr(float(v)) not in traffic
        for client in chain:
            for buf in client.params.buffers.values():
                for v in buf.reshape(-1):
                    assert repr(float(v)) not in traffic
