import numpy as np
import pytest
from scipy import special

from healswin import autodiff as ad
from healswin.autodiff import Tensor

pytestmark = pytest.mark.usefixtures("f64")


def fd_check(fn, tensors, eps=1e-6):
    """Worst norm-wise relative error of analytic gradients against central differences."""
    for t in tensors:
        t.grad = None
    ad.backward(fn())
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        numeric = np.zeros_like(t.data)
        for i in np.ndindex(t.data.shape):
            old = t.data[i]
            t.data[i] = old + eps
            fp = float(fn().data)
            t.data[i] = old - eps
            fm = float(fn().data)
            t.data[i] = old
            numeric[i] = (fp - fm) / (2 * eps)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, np.linalg.norm(analytic - numeric) / scale)
    return worst


def param(rng, *shape, lo=None):
    data = rng.standard_normal(shape)
    if lo is not None:
        data = np.abs(data) + lo
    return Tensor(data, requires_grad=True)


def weights_like(rng, shape):
    return rng.standard_normal(shape)


def test_add_sub_mul_broadcast(rng):
    a, b = param(rng, 3, 4), param(rng, 4)
    w = weights_like(rng, (3, 4))
    assert fd_check(lambda: ((a + b) * w).sum(), [a, b]) < 1e-7
    assert fd_check(lambda: ((a - b) * w).sum(), [a, b]) < 1e-7
    assert fd_check(lambda: (a * b * w).sum(), [a, b]) < 1e-7
    c = param(rng, 3, 1)
    assert fd_check(lambda: (a * c * w).sum(), [a, c]) < 1e-7
    assert fd_check(lambda: ((2.0 - a) * (-b)).sum(), [a, b]) < 1e-7


def test_reciprocal_exp_square(rng):
    a = param(rng, 5, lo=0.5)
    w = weights_like(rng, (5,))
    assert fd_check(lambda: (ad.reciprocal(a) * w).sum(), [a]) < 1e-7
    assert fd_check(lambda: (ad.exp(a) * w).sum(), [a]) < 1e-7
    assert fd_check(lambda: (ad.square(a) * w).sum(), [a]) < 1e-7
    b = param(rng, 5)
    assert fd_check(lambda: ((b / a) * w).sum(), [a, b]) < 1e-7


def test_gelu_is_exact_erf(rng):
    a = param(rng, 20)
    out = ad.gelu(a).data
    assert np.allclose(out, 0.5 * a.data * (1 + special.erf(a.data / np.sqrt(2))))
    w = weights_like(rng, (20,))
    assert fd_check(lambda: (ad.gelu(a) * w).sum(), [a]) < 1e-7


def test_masked_fill(rng):
    a = param(rng, 4, 4)
    mask = rng.random((4, 4)) < 0.3
    w = weights_like(rng, (4, 4))
    assert fd_check(lambda: (ad.masked_fill(a, mask, 2.0) * w).sum(), [a]) < 1e-7
    with pytest.raises(ad.ShapeError):
        ad.masked_fill(a, np.ones(3, dtype=bool), 0.0)


def test_matmul_batched(rng):
    a, b = param(rng, 2, 3, 4), param(rng, 4, 5)
    w = weights_like(rng, (2, 3, 5))
    assert fd_check(lambda: ((a @ b) * w).sum(), [a, b]) < 1e-7
    c = param(rng, 2, 1, 3, 4)
    d = param(rng, 1, 2, 4, 2)
    w2 = weights_like(rng, (2, 2, 3, 2))
    assert fd_check(lambda: (ad.matmul(c, d) * w2).sum(), [c, d]) < 1e-7
    with pytest.raises(ad.ShapeError):
        ad.matmul(a, param(rng, 3, 5))


def test_linear(rng):
    x, W, b = param(rng, 2, 3, 4), param(rng, 4, 6), param(rng, 6)
    w = weights_like(rng, (2, 3, 6))
    assert fd_check(lambda: (ad.linear(x, W, b) * w).sum(), [x, W, b]) < 1e-7


def test_softmax_and_log_softmax(rng):
    a = param(rng, 3, 5)
    w = weights_like(rng, (3, 5))
    assert fd_check(lambda: (ad.softmax(a) * w).sum(), [a]) < 1e-7
    assert fd_check(lambda: (ad.log_softmax(a, axis=0) * w).sum(), [a]) < 1e-7
    s = ad.softmax(a).data
    assert np.allclose(s.sum(axis=-1), 1.0)
    big = Tensor(np.array([1000.0, 0.0, -1000.0]))
    assert np.all(np.isfinite(ad.log_softmax(big).data))


def test_softmax_with_masked_entries(rng):
    a = param(rng, 2, 4)
    mask = np.array([[False, True, False, False], [False, False, False, True]])
    w = weights_like(rng, (2, 4))
    f = lambda: (ad.softmax(ad.masked_fill(a, mask, -np.inf)) * w).sum()  # noqa: E731
    assert fd_check(f, [a]) < 1e-7
    assert np.all(ad.softmax(ad.masked_fill(a, mask, -np.inf)).data[mask] == 0.0)


def test_layer_norm(rng):
    a, g, b = param(rng, 3, 6), param(rng, 6), param(rng, 6)
    w = weights_like(rng, (3, 6))
    assert fd_check(lambda: (ad.layer_norm(a, g, b) * w).sum(), [a, g, b]) < 1e-6
    out = ad.layer_norm(a).data
    assert np.allclose(out.mean(axis=-1), 0.0) and np.allclose(out.var(axis=-1), 1.0, atol=1e-4)


def test_l2_normalize(rng):
    a = param(rng, 4, 3)
    w = weights_like(rng, (4, 3))
    assert fd_check(lambda: (ad.l2_normalize(a) * w).sum(), [a]) < 1e-7
    assert np.allclose(np.linalg.norm(ad.l2_normalize(a).data, axis=-1), 1.0)
    z = Tensor(np.zeros((1, 3)))
    assert np.all(np.isfinite(ad.l2_normalize(z).data))


def test_reductions(rng):
    a = param(rng, 3, 4, 2)
    w = weights_like(rng, (3, 2))
    assert fd_check(lambda: (ad.reduce_sum(a, axis=1) * w).sum(), [a]) < 1e-7
    assert fd_check(lambda: (ad.reduce_mean(a, axis=1, keepdims=True).reshape(3, 2) * w).sum(), [a]) < 1e-7
    assert fd_check(lambda: a.mean(), [a]) < 1e-7


def test_gather_and_scatter(rng):
    a = param(rng, 5, 3)
    w = weights_like(rng, (7, 3))
    idx = np.array([0, 4, 4, 1, 2, 0, 3])
    assert fd_check(lambda: (ad.gather(a, idx, axis=0) * w).sum(), [a]) < 1e-7
    perm = rng.permutation(5)
    w5 = weights_like(rng, (3, 5))
    assert fd_check(lambda: (ad.gather(a.transpose(1, 0), perm, axis=1) * w5).sum(), [a]) < 1e-7
    idx2 = np.array([[0, 1], [4, 4]])
    w2 = weights_like(rng, (2, 2, 3))
    assert fd_check(lambda: (ad.gather(a, idx2, axis=0) * w2).sum(), [a]) < 1e-7
    b = param(rng, 4, 2)
    sidx = np.array([2, 0, 2, 1])
    w3 = weights_like(rng, (3, 2))
    assert fd_check(lambda: (ad.scatter_add(b, sidx, 3) * w3).sum(), [b]) < 1e-7
    expected = np.zeros((3, 2))
    np.add.at(expected, sidx, b.data)
    assert np.allclose(ad.scatter_add(b, sidx, 3).data, expected)


def test_reshape_transpose_concat(rng):
    a, b = param(rng, 2, 3, 4), param(rng, 2, 3, 2)
    w = weights_like(rng, (4, 3, 2))
    assert fd_check(lambda: (a.transpose(2, 1, 0) * w).sum(), [a]) < 1e-7
    w2 = weights_like(rng, (6, 4))
    assert fd_check(lambda: (a.reshape(6, 4) * w2).sum(), [a]) < 1e-7
    w3 = weights_like(rng, (2, 3, 6))
    assert fd_check(lambda: (ad.concat([a, b], axis=-1) * w3).sum(), [a, b]) < 1e-7
    with pytest.raises(ad.ShapeError):
        ad.concat([a, param(rng, 1, 3, 4)], axis=-1)


def test_cosine_attention(rng):
    q, k, v = (param(rng, 1, 2, 2, 4, 3) for _ in range(3))
    tau = Tensor(np.full((2, 1, 1), 0.3), requires_grad=True)
    bias = param(rng, 2, 4, 4)
    mask = np.ones((2, 4, 4), dtype=bool)
    mask[1, :2, 2:] = mask[1, 2:, :2] = False
    w = weights_like(rng, (1, 2, 2, 4, 3))
    f = lambda: (ad.cosine_attention(q, k, v, tau, bias, mask) * w).sum()  # noqa: E731
    assert fd_check(f, [q, k, v, tau, bias]) < 1e-6


def test_cosine_attention_matches_direct_formula(rng):
    q, k, v = (rng.standard_normal((1, 1, 1, 4, 3)) for _ in range(3))
    tau = 0.2
    qn = q / np.linalg.norm(q, axis=-1, keepdims=True)
    kn = k / np.linalg.norm(k, axis=-1, keepdims=True)
    s = qn @ kn.swapaxes(-1, -2) / tau
    p = np.exp(s - s.max(axis=-1, keepdims=True))
    p /= p.sum(axis=-1, keepdims=True)
    out = ad.cosine_attention(Tensor(q), Tensor(k), Tensor(v), Tensor(np.full((1, 1, 1), tau))).data
    assert np.allclose(out, p @ v)


def test_cosine_attention_rejects_bad_input(rng):
    q = Tensor(rng.standard_normal((1, 1, 1, 4, 3)))
    with pytest.raises(ValueError):
        ad.cosine_attention(q, q, q, Tensor(np.full((1, 1, 1), 0.005)))
    with pytest.raises(ad.ShapeError):
        ad.cosine_attention(q, q, q, Tensor(np.full((1, 1, 1), 0.5)), mask=np.ones((1, 3, 3), dtype=bool))
    with pytest.raises(ad.ShapeError):
        ad.cosine_attention(q, Tensor(rng.standard_normal((1, 1, 1, 5, 3))), q, Tensor(np.full((1, 1, 1), 0.5)))


def test_shared_subgraph_accumulates(rng):
    a = param(rng, 3)
    h = a * a
    loss = (h + h * 2.0).sum()
    loss.backward()
    assert np.allclose(a.grad, 6 * a.data)


def test_backward_errors(rng):
    a = param(rng, 3)
    with pytest.raises(ad.ShapeError):
        (a * 2.0).backward()
    with pytest.raises(ValueError):
        Tensor(np.ones(3)).sum().backward()


def test_adamw_step_matches_formula():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = ad.AdamW([p], lr=0.1, betas=(0.9, 0.99), eps=1e-8, weight_decay=0.01)
    g = np.array([0.5, -1.0])
    p.grad = g.copy()
    opt.step()
    expected = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01)
    m = 0.1 * g / (1 - 0.9)
    v = 0.01 * g * g / (1 - 0.99)
    expected -= 0.1 * m / (np.sqrt(v) + 1e-8)
    assert np.allclose(p.data, expected)


def test_adamw_minimizes_quadratic():
    p = Tensor(np.array([3.0, -4.0]), requires_grad=True)
    opt = ad.AdamW([p], lr=0.1, weight_decay=0.0)
    for _ in range(300):
        opt.zero_grad()
        ad.square(p).sum().backward()
        opt.step()
    assert np.all(np.abs(p.data) < 1e-2)


def test_precision_context():
    assert ad.get_dtype() == np.float64
    with ad.precision(np.float32):
        assert Tensor([1.0]).data.dtype == np.float32
    assert Tensor([1.0]).data.dtype == np.float64
    with pytest.raises(ValueError):
        ad.set_dtype(np.int32)


def test_library_gradcheck_agrees(rng):
    a, b = param(rng, 3, 3), param(rng, 3)
    assert ad.gradcheck(lambda: ad.gelu(ad.linear(a, a, b)).sum(), [a, b]) < 1e-6
