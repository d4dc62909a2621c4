import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from hgamn.numerics import (
    AdamState,
    ContainerError,
    DimensionError,
    GRUParams,
    NumericError,
    ParamStore,
    Tape,
    Tensor,
    TrainingStateError,
    adam_step,
    dense,
    dropout,
    grad_check,
    gru_cell,
    gru_sequence,
    linear_decay,
    load_container,
    ops,
    precision,
    rng_stream,
    save_container,
    softmax,
    uniform_init,
)


def _store(seed=0, **shapes):
    st_ = ParamStore()
    rng = np.random.default_rng(seed)
    for name, shape in shapes.items():
        st_.add(name, rng.uniform(-1, 1, shape))
    return st_


# -- dense ---------------------------------------------------------------------

def test_dense_identity(f64):
    y = dense(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)))
    assert np.array_equal(y.data, [[1.0, 2.0]])


def test_dense_hand_value(f64):
    y = dense(Tensor([[1.0, 1.0]]), Tensor([[2.0], [3.0]]), Tensor([1.0]))
    assert y.data.tolist() == [[6.0]]


def test_dense_zero_weight(f64):
    x = Tensor(np.random.default_rng(0).normal(size=(4, 3)))
    assert not dense(x, Tensor(np.zeros((3, 5)))).data.any()


def test_dense_shape_mismatch():
    with pytest.raises(DimensionError):
        dense(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(DimensionError):
        dense(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))), Tensor(np.ones(3)))


# -- softmax ------------------------------------------------------------------

def test_softmax_uniform(f64):
    assert np.allclose(softmax(Tensor([0.0, 0.0, 0.0])).data, 1 / 3, atol=1e-15)


def test_softmax_logs(f64):
    y = softmax(Tensor(np.log([1.0, 2.0, 3.0]))).data
    assert np.allclose(y, [1 / 6, 2 / 6, 3 / 6], atol=1e-15)


def test_softmax_single_unmasked(f64):
    y = softmax(Tensor([5.0, -2.0, 9.0]), mask=[False, True, False]).data
    assert y.tolist() == [0.0, 1.0, 0.0]


def test_softmax_all_masked():
    with pytest.raises(ValueError):
        softmax(Tensor([1.0, 2.0]), mask=[False, False])


@given(hnp.arrays(np.float64, st.integers(1, 12), elements=st.floats(-300, 300)),
       st.lists(st.booleans(), min_size=12, max_size=12))
def test_softmax_is_distribution(x, bits):
    mask = np.array(bits[:len(x)])
    if not mask.any():
        mask[0] = True
    with precision(np.float64):
        y = softmax(Tensor(x), mask=mask).data
    assert (y >= 0).all()
    assert abs(y[mask].sum() - 1.0) < 1e-6
    assert (y[~mask] == 0).all()


# -- GRU ----------------------------------------------------------------------

def _gru(seed=0, d_in=3, h=4):
    store = ParamStore()
    return store, GRUParams.create(store, "g", d_in, h, np.random.default_rng(seed))


def test_gru_zero_params_zero_state(f64):
    store, p = _gru()
    for t in store.values():
        t.data[...] = 0
    out = gru_cell(Tensor(np.ones(3)), Tensor(np.zeros(4)), p)
    assert out.shape == (4,)
    assert not out.data.any()


def test_gru_zero_params_halves_state(f64):
    # z = 0.5 and candidate 0 => h' = h / 2
    store, p = _gru()
    for t in store.values():
        t.data[...] = 0
    out = gru_cell(Tensor(np.ones(3)), Tensor([0.2, -0.4, 0.6, 1.0]), p)
    assert np.allclose(out.data, [0.1, -0.2, 0.3, 0.5])


@given(st.integers(0, 10_000))
def test_gru_stays_bounded(seed):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        _, p = _gru(seed)
        h = Tensor(rng.uniform(-0.99, 0.99, 4))
        for _ in range(20):
            h = gru_cell(Tensor(rng.normal(scale=5, size=3)), h, p)
            assert (np.abs(h.data) < 1).all()


def test_gru_mask_keeps_state(f64):
    _, p = _gru()
    h = Tensor(np.random.default_rng(1).uniform(-1, 1, (2, 4)))
    out = gru_cell(Tensor(np.ones((2, 3))), h, p, mask=[1.0, 0.0])
    assert np.array_equal(out.data[1], h.data[1])
    assert not np.array_equal(out.data[0], h.data[0])


def test_gru_shape_error():
    _, p = _gru()
    with pytest.raises(DimensionError):
        gru_cell(Tensor(np.ones(5)), Tensor(np.zeros(4)), p)


def test_gru_sequence_matches_chained_cells(f64):
    store, p = _gru(d_in=5)
    table = store.add("tab", uniform_init(np.random.default_rng(2), (7, 5), 0.5))
    rng = np.random.default_rng(3)
    idx = rng.integers(0, 7, (3, 6))
    mask = np.ones((3, 6), dtype=bool)
    mask[0, 4:] = False
    mask[2, 1:] = False
    for reverse in (False, True):
        fused = gru_sequence(table, idx, p, mask, reverse=reverse).data
        h = Tensor(np.zeros((3, 4)))
        for t in (range(5, -1, -1) if reverse else range(6)):
            h = gru_cell(ops.take(table, idx[:, t]), h, p, mask[:, t])
        assert np.array_equal(fused, h.data)


def test_gru_cell_gradcheck(f64):
    store, p = _gru()
    x = store.add("x", np.random.default_rng(5).normal(size=(2, 3)))
    h = store.add("h", np.random.default_rng(6).uniform(-1, 1, (2, 4)))
    w = np.arange(8.0).reshape(2, 4)
    err = grad_check(lambda: ops.sum(gru_cell(x, h, p, mask=[1.0, 0.0]) * w), store)
    assert err < 1e-4


def test_gru_sequence_gradcheck(f64):
    store, p = _gru(d_in=5)
    table = store.add("tab", uniform_init(np.random.default_rng(2), (7, 5), 0.5))
    idx = np.random.default_rng(3).integers(0, 7, (3, 6))
    mask = np.ones((3, 6), dtype=bool)
    mask[1, 3:] = False
    for reverse in (False, True):
        f = lambda: ops.sum(ops.tanh(gru_sequence(table, idx, p, mask, reverse=reverse)))
        assert grad_check(f, store) < 1e-4


# -- primitive gradients -------------------------------------------------------

PRIMITIVES = {
    "add": lambda a, b: ops.add(a, b),
    "sub": lambda a, b: ops.sub(a, ops.reshape(b, (1, 4))),
    "mul": lambda a, b: ops.mul(a, b),
    "matmul": lambda a, b: ops.matmul(a, ops.reshape(b, (4, 1))),
    "sigmoid": lambda a, b: ops.sigmoid(a),
    "tanh": lambda a, b: ops.tanh(a),
    "exp": lambda a, b: ops.exp(a),
    "log": lambda a, b: ops.log(ops.exp(a) + 1.0),
    "maximum": lambda a, b: ops.maximum(a, ops.reshape(b, (1, 4)) * 1.0),
    "mean": lambda a, b: ops.mean(a, axis=0),
    "transpose": lambda a, b: ops.transpose(a),
    "concat": lambda a, b: ops.concat([a, ops.reshape(b, (1, 4))], axis=0),
    "take": lambda a, b: ops.take(a, [2, 0, 2, 1]),
    "segment_sum": lambda a, b: ops.segment_sum(a, [1, 0, 1], 2),
    "softmax": lambda a, b: ops.softmax(a, mask=[True, False, True, True]),
    "segment_softmax": lambda a, b: ops.segment_softmax(ops.reshape(a, (-1,)), np.arange(12) % 5, 5),
    "log_softmax": lambda a, b: ops.log_softmax(a),
    "cross_entropy": lambda a, b: ops.cross_entropy(a, [3, 0, 1]),
    "dense": lambda a, b: dense(a, ops.reshape(b, (4, 1)), Tensor([0.5])),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name, f64):
    store = _store(a=(3, 4), b=(1, 4))

    def f():
        out = PRIMITIVES[name](store["a"], store["b"])
        w = Tensor(np.random.default_rng(11).normal(size=out.shape))
        return ops.sum(out * w)

    assert grad_check(f, store) < 1e-4


def test_grad_check_sum_is_exact(f64):
    store = _store(a=(3, 4))
    assert grad_check(lambda: ops.sum(store["a"]), store) < 1e-8


def test_grad_check_constant(f64):
    store = _store(a=(2, 2))
    assert grad_check(lambda: Tensor(3.0), store) == 0.0


def test_grad_check_rejects_nonfinite(f64):
    store = _store(a=(2,))
    with pytest.raises(NumericError):
        grad_check(lambda: Tensor(np.inf), store)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_forward_raises(f64):
    with pytest.raises(NumericError):
        ops.log(Tensor([-1.0]))


def test_ops_do_not_mutate_inputs(f64):
    a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    before = a.data.copy()
    with Tape() as tape:
        y = ops.sum(ops.softmax(ops.tanh(a * 2.0)))
    tape.backward(y)
    assert np.array_equal(a.data, before)


# -- dropout ------------------------------------------------------------------

def test_dropout_identity_cases():
    x = Tensor(np.ones(10))
    assert dropout(x, 0.0, True, np.random.default_rng(0)) is x
    assert dropout(x, 0.9, False, None) is x


def test_dropout_mean_preserved():
    y = dropout(Tensor(np.ones(100_000)), 0.5, True, np.random.default_rng(0)).data
    assert 0.98 <= y.mean() <= 1.02
    assert set(np.unique(y)) <= {0.0, 2.0}


@pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
def test_dropout_rate_bounds(rate):
    with pytest.raises(ValueError):
        dropout(Tensor(np.ones(3)), rate, True, np.random.default_rng(0))


# -- Adam ---------------------------------------------------------------------

def test_adam_zero_grad_leaves_params():
    store = _store(w=(3,))
    before = store["w"].data.copy()
    store["w"].grad = np.zeros(3)
    state = AdamState()
    adam_step(store, state)
    assert np.array_equal(store["w"].data, before)
    assert state.step == 1
    assert store["w"].grad is None


def test_adam_descends_quadratic():
    store = ParamStore()
    w = store.add("w", np.array([1.0]))
    w.grad = 2 * w.data
    adam_step(store, AdamState(lr=1e-3))
    assert w.data[0] < 1.0
    assert math.isclose(w.data[0], 1.0 - 1e-3, rel_tol=1e-6)


def test_adam_deterministic():
    outs = []
    for _ in range(2):
        store = _store(w=(4,))
        state = AdamState()
        for _ in range(3):
            store["w"].grad = np.sin(store["w"].data)
            adam_step(store, state)
        outs.append(store["w"].data.copy())
    assert np.array_equal(*outs)


def test_adam_missing_gradient():
    store = _store(w=(2,), v=(2,))
    store["w"].grad = np.ones(2)
    with pytest.raises(TrainingStateError):
        adam_step(store, AdamState())


def test_linear_decay():
    assert linear_decay(1e-3, 0, 100) == 1e-3
    assert math.isclose(linear_decay(1e-3, 50, 100), 5e-4)
    assert linear_decay(1e-3, 100, 100) == 0.0
    assert linear_decay(1e-3, 200, 100, floor=1e-5) == 1e-5


# -- params, rng --------------------------------------------------------------

def test_param_store_rejects_duplicates():
    store = ParamStore()
    store.add("a", np.zeros(2))
    with pytest.raises(KeyError):
        store.add("a", np.zeros(2))


def test_param_store_order_and_state():
    store = _store(b=(2,), a=(3,))
    assert store.names() == ["b", "a"]
    other = _store(seed=1, b=(2,), a=(3,))
    other.load_state_dict(store.state_dict())
    assert all(np.array_equal(store[k].data, other[k].data) for k in store)


def test_uniform_init_bound():
    x = uniform_init(np.random.default_rng(0), (64, 8))
    assert np.abs(x).max() <= 1 / 8


def test_rng_streams_independent_and_reproducible():
    a = rng_stream(3, "x").random(4)
    assert np.array_equal(a, rng_stream(3, "x").random(4))
    assert not np.array_equal(a, rng_stream(3, "y").random(4))
    assert not np.array_equal(a, rng_stream(4, "x").random(4))


def test_precision_switch():
    with precision(np.float32):
        assert Tensor([1.0]).dtype == np.float32
    with precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64


# -- container ----------------------------------------------------------------

def _saved(tmp_path):
    arrays = {"w": np.arange(6, dtype=np.float32).reshape(2, 3), "i": np.array([1, 2, 3], dtype=np.int64)}
    path = tmp_path / "c"
    save_container(path, arrays, {"note": "x"}, "test-kind", 2)
    return path, arrays


def test_container_round_trip(tmp_path):
    path, arrays = _saved(tmp_path)
    got, meta = load_container(path, "test-kind", 2)
    assert meta == {"note": "x"}
    for k in arrays:
        assert got[k].dtype == arrays[k].dtype and np.array_equal(got[k], arrays[k])


def test_container_version_mismatch_names_versions(tmp_path):
    path, _ = _saved(tmp_path)
    with pytest.raises(ContainerError, match=r"version 2.*version 3"):
        load_container(path, "test-kind", 3)


def test_container_truncated_blob(tmp_path):
    path, _ = _saved(tmp_path)
    blob = (path / "blob.bin").read_bytes()
    (path / "blob.bin").write_bytes(blob[:-4])
    with pytest.raises(ContainerError, match="length"):
        load_container(path, "test-kind", 2)


def test_container_flipped_byte(tmp_path):
    path, _ = _saved(tmp_path)
    blob = bytearray((path / "blob.bin").read_bytes())
    blob[0] ^= 0xFF
    (path / "blob.bin").write_bytes(bytes(blob))
    with pytest.raises(ContainerError, match="checksum"):
        load_container(path, "test-kind", 2)


def test_container_wrong_kind(tmp_path):
    path, _ = _saved(tmp_path)
    with pytest.raises(ContainerError):
        load_container(path, "other", 2)


def test_container_overwrite_is_atomic(tmp_path):
    path, _ = _saved(tmp_path)
    save_container(path, {"z": np.zeros(1)}, {}, "test-kind", 2)
    got, _ = load_container(path, "test-kind", 2)
    assert list(got) == ["z"]
    assert [p.name for p in tmp_path.iterdir()] == ["c"]
