import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from doad import action as act
from doad.config import ModelConfig
from doad.errors import ConfigError, DimensionError
from doad.geometry import BBox
from doad.nn import named_parameters
from doad.tensor import Tensor

import oracles


def block_with_biases(rng, d):
    w = act.TransPCBlockWeights.create(rng, d)
    for lin in (w.key_proj, w.value_proj, w.out_proj):
        lin.b.data[...] = rng.normal(scale=0.3, size=d)
    return w


def run_oracle(F_p, F_pc, w, scaled=False):
    return oracles.transpc_block(F_p, F_pc, w.key_proj.w.data, w.key_proj.b.data, w.value_proj.w.data,
                                 w.value_proj.b.data, w.out_proj.w.data, w.out_proj.b.data, scaled)


@pytest.mark.parametrize("n,scaled", [(1, False), (3, False), (4, True)])
def test_transpc_block_matches_loop_oracle(n, scaled):
    rng = np.random.default_rng(n)
    d = 5
    w = block_with_biases(rng, d)
    F_p, F_pc = rng.normal(size=(n, d)), rng.normal(size=(n, n, d))
    state = act.TransPCState(Tensor(F_p), Tensor(F_pc), np.zeros((n, 4)))
    got = act.transpc_block(state, w, scaled).data
    want, attn = run_oracle(F_p, F_pc, w, scaled)
    assert np.allclose(got, want, atol=1e-12)
    A, _ = act.transpc_attention(Tensor(F_p), Tensor(F_pc), w, scaled)
    assert np.allclose(A.data, attn, atol=1e-12)


def test_single_person_attends_to_itself():
    rng = np.random.default_rng(0)
    w = block_with_biases(rng, 3)
    A, _ = act.transpc_attention(Tensor(rng.normal(size=(1, 3))), Tensor(rng.normal(size=(1, 1, 3))), w)
    assert A.data.tolist() == [[1.0]]


def test_dense_serial_stack_of_two_blocks_by_hand():
    rng = np.random.default_rng(1)
    n, d = 3, 4
    b1, b2 = block_with_biases(rng, d), block_with_biases(rng, d)
    F_p, F_pc = rng.normal(size=(n, d)), rng.normal(size=(n, n, d))
    out1, _ = run_oracle(F_p, F_pc, b1)
    # block 2 queries with F_p + r1 and adds its residual on top
    out2, attn2 = run_oracle(out1, F_pc, b2)
    state = act.TransPCState(Tensor(F_p), Tensor(F_pc), np.zeros((n, 4)))
    got, A = act.transpc_stack(state, [b1, b2], return_attention=True)
    assert np.allclose(got.data, out2, atol=1e-12)
    assert np.allclose(A.data, attn2, atol=1e-12)
    r1 = out1 - F_p
    r2 = out2 - out1
    assert np.allclose(got.data, F_p + r1 + r2, atol=1e-12)


def test_transpc_stack_needs_a_block_and_consistent_shapes():
    state = act.TransPCState(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2, 3))), np.zeros((2, 4)))
    with pytest.raises(ConfigError):
        act.transpc_stack(state, [])
    with pytest.raises(DimensionError):
        act.TransPCState(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3, 3))), np.zeros((2, 4)))
    with pytest.raises(DimensionError):
        act.TransPCState(Tensor(np.zeros((0, 3))), Tensor(np.zeros((0, 0, 3))), np.zeros((0, 4)))


def test_shared_kv_uses_keys_as_values():
    rng = np.random.default_rng(2)
    w = block_with_biases(rng, 3)
    F_pc = Tensor(rng.normal(size=(2, 2, 3)))
    _, V = act.transpc_attention(Tensor(rng.normal(size=(2, 3))), F_pc, w, shared_kv=True)
    assert np.allclose(V.data, w.key_proj(F_pc).data)


def test_repeat_helpers():
    F = Tensor(np.arange(6.0).reshape(3, 2))
    rows, cols = act.repeat_rows(F).data, act.repeat_cols(F).data
    assert rows.shape == cols.shape == (3, 3, 2)
    assert np.array_equal(rows[1, 2], F.data[1]) and np.array_equal(cols[1, 2], F.data[2])


def context_weights(rng, c=3, d=4):
    return act.ContextEncoderWeights.create(rng, c, 4, d)


def test_pc_matrix_is_symmetric_and_matches_single_pair():
    rng = np.random.default_rng(3)
    X = Tensor(rng.normal(size=(4, 3, 12, 12)))
    boxes = np.array([[5.0, 8.0, 30.0, 60.0], [40.0, 10.0, 70.0, 80.0], [60.0, 50.0, 90.0, 95.0]])
    w = context_weights(rng)
    F_pc = act.build_pc_matrix(X, boxes, w).data
    assert F_pc.shape == (3, 3, 4)
    assert np.allclose(F_pc, F_pc.transpose(1, 0, 2))
    single = act.person_context_feature(X, BBox(*boxes[0]), BBox(*boxes[2]), w).data
    assert np.allclose(F_pc[0, 2], single)


def test_pc_feature_is_translation_invariant():
    rng = np.random.default_rng(4)
    base = np.zeros((2, 3, 12, 12))
    base[:, :, 2:7, 1:6] = rng.normal(size=(2, 3, 5, 5))
    shifted = np.roll(base, (3, 4), axis=(2, 3))
    w = context_weights(rng)
    b1, b2 = BBox(16, 20, 32, 48), BBox(24, 16, 44, 40)
    move = lambda b: BBox(b.x1 + 32, b.y1 + 24, b.x2 + 32, b.y2 + 24)  # noqa: E731
    a = act.person_context_feature(Tensor(base), b1, b2, w).data
    b = act.person_context_feature(Tensor(shifted), move(b1), move(b2), w).data
    assert np.allclose(a, b, atol=1e-12)


def test_person_features_pool_time_and_space():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(3, 2, 6, 6))
    proj = act.Linear.create(rng, 2, 4)
    box = np.array([[0.0, 0.0, 48.0, 48.0]])
    got = act.extract_person_features(Tensor(X), box, proj, roi_size=6).data
    # the full-map box with one bin per cell samples every cell symmetrically
    want = X.mean(axis=(0, 2, 3)) @ proj.w.data
    assert np.allclose(got[0], want, atol=1e-12)


def memory_oracle(current, memory, w):
    args = []
    for lin in (w.query, w.key, w.value, w.out):
        args += [lin.w.data, lin.b.data]
    return oracles.memory_fuse(current, memory, *args)


def test_memory_fuse_matches_oracle_and_window():
    rng = np.random.default_rng(6)
    w = act.MemoryWeights.create(rng, 4)
    for lin in (w.query, w.key, w.value, w.out):
        lin.b.data[...] = rng.normal(scale=0.2, size=4)
    bank = act.MemoryBank(window=2)
    for t in (0, 3, 4, 5, 9):
        bank.write(t, rng.normal(size=(t % 3 + 1, 4)))
    assert bank.touched(4) == [3, 5]
    current = rng.normal(size=(2, 4))
    memory = bank.read(4)
    assert memory.shape == (1 + 3, 4)
    got = act.memory_fuse(Tensor(current), bank, 4, w).data
    assert np.allclose(got, memory_oracle(current, memory, w), atol=1e-12)


def test_memory_fuse_without_entries_is_identity():
    rng = np.random.default_rng(7)
    w = act.MemoryWeights.create(rng, 3)
    bank = act.MemoryBank(window=1)
    bank.write(5, rng.normal(size=(2, 3)))
    cur = Tensor(rng.normal(size=(2, 3)))
    assert act.memory_fuse(cur, bank, 5, w) is cur
    assert act.memory_fuse(cur, bank, 8, w) is cur


def test_memory_bank_write_copies():
    bank = act.MemoryBank()
    x = np.ones((1, 2))
    bank.write(0, x)
    x[...] = 5
    assert bank.read(1).tolist() == [[1.0, 1.0]]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(0, 1000))
def test_renormalized_rows_exclude_self(n, seed):
    rng = np.random.default_rng(seed)
    A = rng.dirichlet(np.ones(n), size=n)
    R = act.renormalize_without_self(A)
    assert np.all(np.diag(R) == 0)
    if n > 1:
        assert np.allclose(R.sum(axis=1), 1)
        i, j = 0, 1
        assert R[i, j] == pytest.approx(A[i, j] / (1 - A[i, i]))
    else:
        assert R.tolist() == [[0.0]]


def test_action_loss_uniform_logits():
    d = 3
    pose = act.Linear.create(np.random.default_rng(0), d, 3)
    inter = act.Linear.create(np.random.default_rng(1), d, 3)
    pose.zero_()
    inter.zero_()
    _, _, loss = act.action_head_and_loss(Tensor(np.ones((2, d))), [0, 2], np.zeros((2, 3)), pose, inter)
    # BCE sums over the three interaction labels and averages over rows
    assert loss.item() == pytest.approx(np.log(3) + 3 * np.log(2))


def test_branch_weights_are_disjoint():
    cfg = ModelConfig(channels=4, feat_dim=4, pc_channels=4, precision="float64")
    w = act.ActionWeights.create(np.random.default_rng(0), cfg)
    assert len(w.blocks) == cfg.transpc_blocks
    ids = [id(p) for _, p in named_parameters(w)]
    assert len(ids) == len(set(ids))
