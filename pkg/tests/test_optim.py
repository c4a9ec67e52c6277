import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pdl.optim import (AdamState, FormatError, ParamStore, adam_step, load_checkpoint, lr_at, read_arrays,
                       save_checkpoint, write_arrays)
from pdl.tensor import ContractError, Tensor, backward, linear


def test_linear_examples():
    assert np.array_equal(linear(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor([0.0, 0.0])).data, [[1, 2]])
    out = linear(Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0], [1.0, 0.0]]), Tensor([1.0, 1.0]))
    assert np.array_equal(out.data, [[1, 2]])
    assert linear(Tensor(np.zeros((0, 2))), Tensor(np.zeros((2, 3))), Tensor(np.zeros(3))).shape == (0, 3)


def test_backward_examples():
    from pdl.tensor import max_pool_rows, parameter
    x = parameter([3.0])
    backward((x * x).sum())
    assert x.grad[0] == 6.0
    backward((x * x).sum())
    assert x.grad[0] == 12.0
    assert np.array_equal(Tensor([-1.0, 0.0, 2.0]).relu().data, [0, 0, 2])
    assert np.array_equal(max_pool_rows(Tensor([[1.0, 5.0], [3.0, 2.0]])).data, [3, 5])


def test_max_pool_tie_goes_to_lowest_row():
    from pdl.tensor import max_pool_rows, parameter
    x = parameter([[2.0], [2.0], [1.0]])
    backward(max_pool_rows(x).sum())
    assert np.array_equal(x.grad[:, 0], [1.0, 0.0, 0.0])


def store(values: dict) -> ParamStore:
    return ParamStore({k: np.asarray(v, float) for k, v in values.items()})


def test_adam_first_step_moves_by_lr():
    p = store({"w": [0.5]})
    st_ = AdamState.for_params(p)
    p["w"].grad = np.array([1.0])
    adam_step(p, st_, 0.1)
    assert p["w"].data[0] == pytest.approx(0.4, abs=1e-8)
    assert st_.step == 1
    assert np.array_equal(p["w"].grad, [1.0])  # grads are left for the caller


def test_adam_zero_grad_is_noop():
    p = store({"w": [0.5, -1.0]})
    st_ = AdamState.for_params(p)
    p["w"].grad = np.zeros(2)
    adam_step(p, st_, 0.1)
    assert np.array_equal(p["w"].data, [0.5, -1.0])


def test_adam_missing_grad_names_parameter():
    p = store({"enc.w": [1.0], "reg.b": [2.0]})
    p["enc.w"].grad = np.ones(1)
    with pytest.raises(ContractError, match="reg.b"):
        adam_step(p, AdamState.for_params(p), 0.1)


def test_adam_matches_closed_form_for_constant_gradient():
    # constant g: m_hat = g and v_hat = g^2 at every step, so each step moves lr*g/(|g|+eps)
    p = store({"w": [0.0]})
    st_ = AdamState.for_params(p)
    for _ in range(10):
        p["w"].grad = np.array([2.0])
        adam_step(p, st_, 0.01)
    assert p["w"].data[0] == pytest.approx(-0.1, abs=1e-7)


def test_lr_schedule_examples():
    assert lr_at(0, 1e-3) == 0.0
    assert lr_at(500, 1e-3) == pytest.approx(1e-3)
    assert lr_at(250, 1e-3) == pytest.approx(5e-4)
    assert lr_at(500 + 2 * 1000, 1.0, 500, 0.9, 1000) == pytest.approx(0.81)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 100_000))
def test_lr_never_exceeds_base(step):
    assert 0.0 <= lr_at(step, 2e-3) <= 2e-3


def test_store_iteration_sorted_and_unique():
    p = store({"b": [1.0], "a": [2.0]})
    assert p.keys() == ["a", "b"]
    with pytest.raises(KeyError):
        p.add("a", [0.0])


def test_subset_shares_tensors():
    p = store({"enc.w": [1.0], "reg.w": [2.0]})
    sub = p.subset("enc.")
    assert sub.keys() == ["enc.w"] and sub["enc.w"] is p["enc.w"]


def test_snapshot_is_frozen():
    p = store({"w": [1.0]})
    snap = p.snapshot()
    with pytest.raises(ValueError):
        snap["w"].data[0] = 5.0
    p["w"].data = np.array([3.0])
    assert snap["w"].data[0] == 1.0


def test_checkpoint_roundtrip_bit_exact(tmp_path, rng):
    p = store({"enc.l0.W": rng.standard_normal((3, 4)), "reg.b": rng.standard_normal(9),
               "scalar": np.array(np.pi)})
    st_ = AdamState.for_params(p)
    for t in p.values():
        t.grad = rng.standard_normal(t.shape)
    adam_step(p, st_, 1e-3)
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, p, st_)
    q = store({k: np.zeros_like(v) for k, v in p.arrays().items()})
    st2 = load_checkpoint(path, q)
    for k in p.keys():
        assert np.array_equal(p[k].data, q[k].data)
        assert np.array_equal(st_.m[k], st2.m[k]) and np.array_equal(st_.v[k], st2.v[k])
    assert st2.step == 1
    save_checkpoint(tmp_path / "b.ckpt", q, st2)
    assert path.read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert (tmp_path / "a.ckpt.opt").read_bytes() == (tmp_path / "b.ckpt.opt").read_bytes()


def test_checkpoint_header_layout(tmp_path):
    write_arrays(tmp_path / "x", {"ab": np.array([[1.0, 2.0]])})
    raw = (tmp_path / "x").read_bytes()
    assert raw[:8] == b"PDLCKPT1"
    assert int.from_bytes(raw[8:16], "little") == 1
    assert int.from_bytes(raw[16:24], "little") == 2 and raw[24:26] == b"ab"
    assert int.from_bytes(raw[26:34], "little") == 2
    assert np.frombuffer(raw[-16:], "<f8").tolist() == [1.0, 2.0]


@pytest.mark.parametrize("cut", [4, 12, 30, -3])
def test_corrupt_checkpoint_reports_offset(tmp_path, cut):
    write_arrays(tmp_path / "x", {"w": np.arange(6.0).reshape(2, 3)})
    raw = (tmp_path / "x").read_bytes()
    bad = tmp_path / "bad"
    bad.write_bytes(raw[:cut])
    with pytest.raises(FormatError) as ei:
        read_arrays(bad)
    assert 0 <= ei.value.offset <= len(raw)


def test_trailing_bytes_rejected(tmp_path):
    write_arrays(tmp_path / "x", {"w": np.ones(2)})
    (tmp_path / "y").write_bytes((tmp_path / "x").read_bytes() + b"\0")
    with pytest.raises(FormatError):
        read_arrays(tmp_path / "y")


def test_strict_load_rejects_unknown_names(tmp_path):
    write_arrays(tmp_path / "x", {"w": np.ones(2), "extra": np.ones(1)})
    p = store({"w": np.zeros(2)})
    with pytest.raises(KeyError):
        load_checkpoint(tmp_path / "x", p)
    load_checkpoint(tmp_path / "x", p, strict=False)
    assert np.array_equal(p["w"].data, np.ones(2))


def test_training_is_deterministic():
    def run():
        r = np.random.default_rng(0)
        p = store({"W": r.standard_normal((3, 2)), "b": np.zeros(2)})
        st_ = AdamState.for_params(p)
        x = r.standard_normal((5, 3))
        for i in range(20):
            p.zero_grad()
            backward((linear(Tensor(x), p["W"], p["b"]) ** 2).sum())
            adam_step(p, st_, lr_at(i + 1, 1e-2, 5))
        return p.arrays()
    a, b = run(), run()
    assert all(np.array_equal(a[k], b[k]) for k in a)
