import numpy as np
import pytest

from mic import autodiff as ad


def naive_matmul(a, b):
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def central_diff(f, x, eps=1e-5):
    x = x.copy()
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        up = f(x)
        x[idx] = orig - eps
        down = f(x)
        x[idx] = orig
        g[idx] = (up - down) / (2 * eps)
    return g


def taped_grad(fn, x):
    tape = ad.Tape()
    v = tape.leaf(x, "x")
    return ad.backward(fn(v))["x"]


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b)))


# --- matmul ---

def test_matmul_identity():
    out = ad.matmul(np.eye(2), np.array([[3.0], [4.0]]))
    np.testing.assert_array_equal(out, [[3.0], [4.0]])


def test_matmul_row_by_column():
    assert ad.matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))[0, 0] == 11.0


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    assert np.max(np.abs(ad.matmul(a, b) - naive_matmul(a, b))) < 1e-12


def test_matmul_shape_error():
    with pytest.raises(ad.ShapeError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_records_on_tape():
    tape = ad.Tape()
    a = tape.leaf(np.ones((2, 2)), "a")
    out = ad.matmul(a, np.ones((2, 1)))
    assert isinstance(out, ad.Var) and len(tape) == 1


# --- relu ---

def test_relu_values():
    np.testing.assert_array_equal(ad.relu(np.array([[-1.0, 0.0, 2.0]])), [[0.0, 0.0, 2.0]])


def test_relu_all_negative():
    assert not ad.relu(-np.abs(np.random.default_rng(1).standard_normal((3, 4))) - 0.1).any()


def test_relu_gradient_is_positive_mask():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, 5))
    x = np.where(np.abs(x) < 1e-3, 0.5, x)
    w = rng.standard_normal(x.shape)
    g = taped_grad(lambda v: ad.total(ad.mul(ad.relu(v), w)), x)
    np.testing.assert_array_equal(g, w * (x > 0))
    num = central_diff(lambda z: float((np.maximum(z, 0) * w).sum()), x)
    assert rel_err(g, num) < 1e-6


def test_relu_subgradient_at_zero():
    g = taped_grad(lambda v: ad.total(ad.relu(v)), np.zeros((1, 3)))
    np.testing.assert_array_equal(g, 0.0)


# --- l2_normalize ---

def test_normalize_345():
    np.testing.assert_allclose(ad.l2_normalize(np.array([[3.0, 4.0]])), [[0.6, 0.8]], atol=1e-15)


def test_normalize_unit_row_unchanged():
    row = np.array([[0.6, 0.8]])
    np.testing.assert_allclose(ad.l2_normalize(row), row, atol=1e-15)


def test_normalize_gradient_matches_fd():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((3, 6))
    w = rng.standard_normal(x.shape)

    def f(z):
        return float((ad.l2_normalize(z) * w).sum())

    g = taped_grad(lambda v: ad.total(ad.mul(ad.l2_normalize(v), w)), x)
    num = central_diff(f, x)
    assert np.max(np.abs(g - num) / np.maximum(1e-8, np.abs(num))) < 1e-4


def test_normalize_degenerate_row_falls_back_to_e1():
    x = np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 2.0]])
    with pytest.warns(ad.DegenerateRowWarning):
        out = ad.l2_normalize(x)
    np.testing.assert_array_equal(out[0], [1.0, 0.0, 0.0])
    np.testing.assert_allclose(out[1], [1 / 3, 2 / 3, 2 / 3])


def test_normalize_rows_unit_norm():
    x = np.random.default_rng(4).standard_normal((50, 9)) * 1e3
    assert np.max(np.abs(np.linalg.norm(ad.l2_normalize(x), axis=1) - 1)) < 1e-12


# --- grad_reverse ---

def test_grad_reverse_forward_identity():
    x = np.array([[0.2, -0.7]])
    out = ad.grad_reverse(x)
    assert out.tobytes() == x.tobytes()


def test_grad_reverse_flips_upstream():
    g = taped_grad(lambda v: ad.total(ad.scale(ad.grad_reverse(v), 0.3)), np.array([[1.0]]))
    assert g[0, 0] == -0.3


def test_grad_reverse_negates_composed_gradient():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 4))
    w = rng.standard_normal((4, 3))

    def loss(v, rev):
        h = ad.grad_reverse(v) if rev else v
        return ad.total(ad.square(ad.l2_normalize(ad.matmul(h, w))))

    g_rev = taped_grad(lambda v: loss(v, True), x)
    num = central_diff(lambda z: float(loss(z, False)[0, 0]), x)
    assert rel_err(g_rev, -num) < 1e-6
    g_plain = taped_grad(lambda v: loss(v, False), x)
    assert np.array_equal(g_rev, -g_plain)


# --- backward ---

def test_backward_square():
    tape = ad.Tape()
    x = tape.leaf(3.0, "x")
    assert ad.backward(ad.mul(x, x))["x"][0, 0] == 6.0


def test_backward_unused_param_zero():
    tape = ad.Tape()
    x = tape.leaf(2.0, "x")
    y = tape.leaf(np.ones((2, 2)), "y")
    g = ad.backward(ad.square(x))
    np.testing.assert_array_equal(g["y"], 0.0)


def test_backward_accumulates_fanout():
    tape = ad.Tape()
    x = tape.leaf(np.array([[1.0, 2.0]]), "x")
    loss = ad.total(ad.add(ad.mul(x, x), x))
    np.testing.assert_array_equal(ad.backward(loss)["x"], [[3.0, 5.0]])


def test_backward_rejects_non_scalar():
    tape = ad.Tape()
    x = tape.leaf(np.ones((2, 2)), "x")
    with pytest.raises(ad.ShapeError):
        ad.backward(ad.relu(x))


def test_backward_deterministic():
    rng = np.random.default_rng(6)
    tape = ad.Tape()
    w = tape.leaf(rng.standard_normal((5, 4)), "w")
    x = rng.standard_normal((7, 5))
    loss = ad.mean(ad.square(ad.relu(ad.matmul(x, w))))
    g1, g2 = ad.backward(loss), ad.backward(loss)
    assert g1["w"].tobytes() == g2["w"].tobytes()


def test_mixed_tapes_rejected():
    a = ad.Tape().leaf(1.0)
    b = ad.Tape().leaf(1.0)
    with pytest.raises(ValueError):
        ad.add(a, b)


@pytest.mark.parametrize("seed", range(20))
def test_primitives_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((4, 3))
    b = rng.standard_normal((3, 5))
    bias = rng.standard_normal((1, 5))
    w = rng.standard_normal((4, 5))
    idx = np.array([0, 2, 2, 3])
    mask = rng.random((4, 5)) < 0.7
    mask[:, 0] = True

    # push relu inputs at least 0.2 away from the kink
    shift = np.where(a @ b + bias >= 0, 0.2, -0.2)

    def build(p):
        h = ad.relu(ad.add(ad.add(ad.matmul(p["a"], p["b"]), p["bias"]), shift))
        n = ad.l2_normalize(ad.add(ad.matmul(p["a"], p["b"]), p["bias"]))
        s = ad.sqrt(ad.sum_rows(ad.square(ad.gather_rows(n, idx))), 1e-12)
        lse = ad.logsumexp_rows(ad.mul(n, w), mask)
        e = ad.exp(ad.scale(ad.transpose(n), 0.5))
        lg = ad.log(ad.add(ad.square(h), 1.0))
        return ad.add(ad.add(ad.total(ad.mul(h, w)), ad.mean(s)),
                      ad.add(ad.total(lse), ad.add(ad.mean(e), ad.total(ad.sub(lg, n)))))

    err = ad.finite_diff_check(build, {"a": a, "b": b, "bias": bias}, eps=1e-5)
    assert err < 1e-4


def test_finite_diff_check_linear():
    err = ad.finite_diff_check(lambda p: ad.total(ad.scale(p["x"], 2.0)), {"x": np.array([[1.5, -2.0]])})
    assert err < 1e-10


def test_finite_diff_check_relu_away_from_kink():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((6, 6))
    x = np.where(np.abs(x) < 1e-3, 0.5, x)
    err = ad.finite_diff_check(lambda p: ad.total(ad.relu(p["x"])), {"x": x})
    assert err < 1e-6


def test_finite_diff_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        ad.finite_diff_check(lambda p: ad.total(p["x"]), {"x": np.ones((1, 1))}, eps=0)
