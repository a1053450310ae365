"""Autodiff engine tests: op semantics, finite-difference checks, tape accounting."""

import numpy as np
import pytest

from localsup import tensor as T
from localsup.tensor import (
    CropBoundsError,
    Graph,
    Parameter,
    ShapeMismatchError,
    Tensor,
    backward,
    detach,
    gradient_check,
)


def rng_for(name: str) -> np.random.Generator:
    return np.random.default_rng(abs(hash(name)) % (2**32))


# ---------------------------------------------------------------------------
# conv2d


def test_conv_all_ones_sums_window():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Parameter(np.ones((1, 1, 3, 3)))
    b = Parameter(np.zeros(1))
    out = T.conv2d(x, w, b, stride=1, padding=0)
    assert out.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == 9.0


def test_conv_identity_kernel_preserves_input():
    rng = rng_for("conv-id")
    x = Tensor(rng.standard_normal((1, 1, 6, 7)))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    out = T.conv2d(x, Parameter(k), Parameter(np.zeros(1)), stride=1, padding=1)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_output_shape_formula():
    for h, w, k, s, p in [(8, 8, 3, 1, 0), (9, 13, 3, 2, 1), (16, 16, 3, 3, 1), (5, 5, 5, 1, 2)]:
        x = Tensor(np.zeros((1, 2, h, w)))
        wt = Parameter(np.zeros((4, 2, k, k)))
        out = T.conv2d(x, wt, Parameter(np.zeros(4)), stride=s, padding=p)
        oh = (h + 2 * p - k) // s + 1
        ow = (w + 2 * p - k) // s + 1
        assert out.shape == (1, 4, oh, ow)


def test_conv_channel_mismatch_names_axes():
    x = Tensor(np.zeros((1, 3, 8, 8)))
    w = Parameter(np.zeros((4, 2, 3, 3)))
    with pytest.raises(ShapeMismatchError, match=r"C=3.*I=2"):
        T.conv2d(x, w, Parameter(np.zeros(4)))


def test_conv_gradient_matches_finite_differences():
    rng = rng_for("conv-fd")
    x = Tensor(rng.standard_normal((2, 3, 8, 8)), requires_grad=True)
    w = Parameter(rng.standard_normal((4, 3, 3, 3)) * 0.5)
    b = Parameter(rng.standard_normal(4) * 0.1)

    def f():
        return T.tmean(T.conv2d(x, w, b, stride=2, padding=1))

    assert gradient_check(f, [x, w, b], step=1e-5) < 1e-6


# ---------------------------------------------------------------------------
# primitive set


def test_softmax_uniform_on_equal_logits():
    out = T.softmax(Tensor(np.zeros(3)))
    np.testing.assert_allclose(out.data, np.full(3, 1.0 / 3.0), atol=1e-15)


def test_maxpool_basic():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    out = T.maxpool2d(x, 2)
    assert out.data.reshape(-1)[0] == 4.0


def test_maxpool_indivisible_raises():
    with pytest.raises(ShapeMismatchError):
        T.maxpool2d(Tensor(np.zeros((1, 1, 5, 4))), 2)


def _fd_case(name, builder, shapes, margin=None, step=1e-5, tol=1e-5):
    rng = rng_for(name)
    tensors = [Tensor(rng.standard_normal(s), requires_grad=True) for s in shapes]
    if margin is not None:
        for t in tensors:
            # keep every element away from the op's kink by the spec margin
            t.data = np.where(np.abs(t.data) < margin, t.data + 2 * margin, t.data)
    err = gradient_check(lambda: builder(*tensors), tensors, step=step)
    assert err < tol, f"{name}: finite-difference mismatch {err:.3g}"


@pytest.mark.parametrize("trial", range(10))
def test_primitives_pass_finite_difference_checks(trial):
    rng = rng_for(f"shapes-{trial}")
    n = int(rng.integers(2, 5))
    m = int(rng.integers(2, 5))
    k = int(rng.integers(2, 5))
    _fd_case(f"add-{trial}", lambda a, b: T.tsum(T.add(a, b)), [(n, m), (n, m)])
    _fd_case(f"mul-{trial}", lambda a, b: T.tsum(T.mul(a, b)), [(n, m), (n, m)])
    _fd_case(f"tanh-{trial}", lambda a: T.tsum(T.tanh(a)), [(n, m)])
    _fd_case(f"sigmoid-{trial}", lambda a: T.tsum(T.sigmoid(a)), [(n, m)])
    _fd_case(f"relu-{trial}", lambda a: T.tsum(T.relu(a)), [(n, m)], margin=1e-3)
    _fd_case(f"mean-{trial}", lambda a: T.tmean(a), [(n, m, k)])
    _fd_case(f"meanax-{trial}", lambda a: T.tsum(T.tmean(a, axis=1)), [(n, m, k)])
    _fd_case(f"softmax-{trial}", lambda a: T.tsum(T.mul(T.softmax(a), T.softmax(a))), [(m + 2,)])
    _fd_case(f"matmul-{trial}", lambda a, b: T.tsum(T.matmul(a, b)), [(n, m), (m, k)])
    _fd_case(f"linear-{trial}", lambda a, w, b: T.tsum(T.linear(a, w, b)), [(n, m), (k, m), (k,)])
    _fd_case(f"transpose-{trial}", lambda a: T.tsum(T.mul(T.transpose2d(a), T.transpose2d(a))), [(n, m)])
    _fd_case(f"reshape-{trial}", lambda a: T.tsum(T.reshape(a, (m, n))), [(n, m)])
    _fd_case(f"concat-{trial}", lambda a, b: T.tsum(T.concat([a, b], axis=0)), [(n, m), (k, m)])
    _fd_case(f"crop-{trial}", lambda a: T.tsum(T.crop(a, 1, 1, n, m)), [(1, 2, n + 2, m + 2)])
    _fd_case(f"upsample-{trial}", lambda a: T.tsum(T.upsample_nearest(a, 2)), [(1, 2, n, m)])
    _fd_case(f"log-{trial}", lambda a: T.tsum(T.tlog(T.add(T.mul(a, a), 1.0))), [(n, m)])
    _fd_case(f"amax-{trial}", lambda a: T.tsum(T.amax(a, axis=0)), [(n, m)], margin=1e-3)


def test_maxpool_finite_difference_away_from_ties():
    rng = rng_for("maxpool-fd")
    # distinct entries with gaps > 1e-3 keep finite differences off the kink
    base = rng.permutation(4 * 8 * 8).astype(float).reshape(1, 4, 8, 8) * 0.01
    x = Tensor(base, requires_grad=True)
    assert gradient_check(lambda: T.tmean(T.maxpool2d(x, 2)), [x]) < 1e-6


def test_adaptive_avgpool_finite_difference_and_shape():
    rng = rng_for("adapt-fd")
    x = Tensor(rng.standard_normal((1, 3, 7, 9)), requires_grad=True)
    out = T.adaptive_avgpool2d(x, 3, 4)
    assert out.shape == (1, 3, 3, 4)
    assert gradient_check(lambda: T.tmean(T.adaptive_avgpool2d(x, 3, 4)), [x]) < 1e-6


def test_crop_out_of_bounds_reports_region_and_extent():
    x = Tensor(np.zeros((1, 1, 4, 4)))
    with pytest.raises(CropBoundsError, match=r"row=2.*h=3.*4x4"):
        T.crop(x, 2, 0, 3, 2)


def test_upsample_nearest_values():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    out = T.upsample_nearest(x, 2)
    np.testing.assert_array_equal(
        out.data[0, 0],
        np.array([[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]], dtype=float))


# ---------------------------------------------------------------------------
# cross_entropy


def test_cross_entropy_uniform_logits():
    loss = T.cross_entropy(Tensor(np.zeros(4)), 1)
    assert abs(loss.item() - np.log(4.0)) < 1e-12


def test_cross_entropy_saturated_case():
    loss = T.cross_entropy(Tensor(np.array([30.0, -30.0])), 0)
    assert loss.item() < 1e-10


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValueError):
        T.cross_entropy(Tensor(np.zeros(3)), 3)


def test_cross_entropy_gradient_closed_form():
    rng = rng_for("ce-grad")
    logits = Tensor(rng.standard_normal(5), requires_grad=True)
    with Graph():
        loss = T.cross_entropy(logits, 2)
        backward(loss)
    z = logits.data - logits.data.max()
    probs = np.exp(z) / np.exp(z).sum()
    onehot = np.zeros(5)
    onehot[2] = 1.0
    np.testing.assert_allclose(logits.grad, probs - onehot, atol=1e-8)


def test_cross_entropy_positive_unless_point_mass():
    rng = rng_for("ce-pos")
    for _ in range(20):
        loss = T.cross_entropy(Tensor(rng.standard_normal(4)), int(rng.integers(4)))
        assert loss.item() > 0.0


# ---------------------------------------------------------------------------
# l1_loss


def test_l1_zero_when_equal():
    x = Tensor(np.array([1.0, -2.0, 3.0]))
    assert T.l1_loss(x, x).item() == 0.0


def test_l1_hand_value():
    assert T.l1_loss(Tensor(np.array([1.0, -1.0])), Tensor(np.zeros(2))).item() == 1.0


def test_l1_subgradient_zero_at_equality():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Graph():
        loss = T.l1_loss(x, Tensor(np.array([1.0, 2.0])))
        backward(loss)
    np.testing.assert_array_equal(x.grad, np.zeros(2))


def test_l1_finite_difference_away_from_kinks():
    rng = rng_for("l1-fd")
    pred = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    target = Tensor(pred.data + np.where(rng.standard_normal((3, 4)) > 0, 0.5, -0.5))
    assert gradient_check(lambda: T.l1_loss(pred, target), [pred]) < 1e-6


def test_l1_no_gradient_into_target():
    pred = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    target = Tensor(np.array([0.0, 0.0]), requires_grad=True)
    with Graph():
        backward(T.l1_loss(pred, target))
    assert pred.grad is not None
    assert target.grad is None


def test_l1_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        T.l1_loss(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


# ---------------------------------------------------------------------------
# backward / detach


def test_backward_sum_gives_ones():
    x = Tensor(np.zeros((2, 3, 4)), requires_grad=True)
    with Graph():
        backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_requires_scalar():
    x = Tensor(np.zeros(3), requires_grad=True)
    y = T.relu(x)
    with pytest.raises(ValueError):
        backward(y)


def test_backward_through_detached_input_leaves_no_grad():
    x = Tensor(np.ones(4), requires_grad=True)
    d = detach(x)
    w = Parameter(np.full(4, 2.0))
    with Graph():
        backward(T.tsum(T.mul(d, w)))
    assert x.grad is None
    assert w.grad is not None


def test_backward_touches_only_ancestry():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    with Graph():
        la = T.tsum(T.mul(a, a))
        T.tsum(T.mul(b, b))  # recorded but not backpropagated
        backward(la)
    assert a.grad is not None
    assert b.grad is None


def test_composite_network_finite_difference():
    rng = rng_for("composite")
    x = Tensor(rng.standard_normal((1, 2, 8, 8)), requires_grad=True)
    w1 = Parameter(rng.standard_normal((3, 2, 3, 3)) * 0.5)
    b1 = Parameter(np.zeros(3))
    w2 = Parameter(rng.standard_normal((4, 3 * 4 * 4)) * 0.3)
    b2 = Parameter(np.zeros(4))

    def f():
        h = T.relu(T.conv2d(x, w1, b1, stride=2, padding=1))
        flat = T.reshape(h, (1, 3 * 4 * 4))
        logits = T.linear(flat, w2, b2)
        return T.cross_entropy(T.reshape(logits, (4,)), 1)

    assert gradient_check(f, [x, w1, b1, w2, b2]) < 1e-5


def test_detach_idempotent_and_value_equal():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    d1 = detach(x)
    d2 = detach(d1)
    np.testing.assert_array_equal(d1.data, x.data)
    np.testing.assert_array_equal(d2.data, d1.data)
    assert not d1.requires_grad and not d2.requires_grad


# ---------------------------------------------------------------------------
# graph accounting


def test_retained_bytes_matches_hand_count_and_releases():
    x = Tensor(np.ones((2, 5)), requires_grad=True)   # 10 elements
    with Graph() as g:
        y = T.relu(x)                                  # +10 (x) +10 (y)
        z = T.tsum(y)                                  # +1 (z)
        assert g.retained_bytes == (10 + 10 + 1) * 8
        assert g.peak_retained_bytes == g.retained_bytes
        backward(z)
        assert g.retained_bytes == 0
    assert x.grad is not None


def test_parameters_excluded_from_retained_bytes():
    x = Tensor(np.ones((4, 3)), requires_grad=True)
    w = Parameter(np.ones((2, 3)))
    b = Parameter(np.zeros(2))
    with Graph() as g:
        out = T.linear(x, w, b)
        # retained: x (12) + out (8); w and b are parameters
        assert g.retained_bytes == (12 + 8) * 8
        backward(T.tsum(out))


def test_untracked_forward_records_nothing():
    x = Tensor(np.ones((8, 8)))
    with Graph() as g:
        T.relu(T.mul(x, 2.0))
        assert g.retained_bytes == 0
        assert not g.nodes


def test_no_grad_suppresses_tracking():
    x = Tensor(np.ones(5), requires_grad=True)
    with Graph() as g:
        with T.no_grad():
            y = T.relu(x)
        assert not y.requires_grad
        assert g.retained_bytes == 0


def test_graph_retained_equals_recorded_node_sum():
    rng = rng_for("graph-sum")
    x = Tensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True)
    w = Parameter(rng.standard_normal((3, 2, 3, 3)))
    with Graph() as g:
        h = T.relu(T.conv2d(x, w, Parameter(np.zeros(3)), padding=1))
        T.tsum(h)
        seen = {}
        for _, inputs, out in g.nodes:
            for t in inputs + (out,):
                if not t.is_param:
                    seen[id(t)] = t.data.size
        assert g.retained_bytes == sum(seen.values()) * 8


def test_ops_deterministic_bit_identical():
    rng = rng_for("determinism")
    data = rng.standard_normal((1, 3, 10, 10))
    wdat = rng.standard_normal((4, 3, 3, 3))
    outs = []
    for _ in range(2):
        x = Tensor(data.copy(), requires_grad=True)
        w = Parameter(wdat.copy())
        b = Parameter(np.zeros(4))
        with Graph():
            out = T.relu(T.conv2d(x, w, b, stride=2, padding=1))
            loss = T.tmean(out)
            backward(loss)
        outs.append((out.data.copy(), loss.item(), x.grad.copy(), w.grad.copy()))
    assert np.array_equal(outs[0][0], outs[1][0])
    assert outs[0][1] == outs[1][1]
    assert np.array_equal(outs[0][2], outs[1][2])
    assert np.array_equal(outs[0][3], outs[1][3])
