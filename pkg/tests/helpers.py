"""Shared test utilities: the central finite-difference oracle and the
randomized op-instance catalogue it runs against."""
import numpy as np

from textdistill import autodiff as ad


def fd_max_rel_err(make_loss, params, h=1e-5, max_entries=None, rng=None):
    """Compare reverse-mode gradients of ``make_loss()`` (a fresh scalar node
    per call) against central finite differences on every entry of ``params``.

    Returns the largest relative error, |ad - fd| / max(|ad|, |fd|, 1e-6).
    """
    for p in params:
        p.zero_grad()
    ad.backward(make_loss())
    grads = [p.grad.copy() for p in params]
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        idxs = range(flat.size)
        if max_entries is not None and flat.size > max_entries:
            rng = rng or np.random.default_rng(0)
            idxs = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = make_loss().item()
            flat[i] = orig - h
            f_minus = make_loss().item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2 * h)
            a = g.reshape(-1)[i]
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-6))
    for p in params:
        p.zero_grad()
    return worst


def _leaf(rng, shape, std=1.0):
    return ad.Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def _away_from_kink(x, margin=0.05):
    d = x.data
    d[np.abs(d) < margin] += 2 * margin
    return x


def _scalarize(t, rng):
    """Collapse any tensor to a scalar through a fixed random functional."""
    w = ad.Tensor(rng.normal(size=t.shape))
    return ad.reduce_sum(ad.mul(t, w))


def op_case_catalogue():
    """(name, builder) pairs; builder(rng) -> (params, make_loss)."""

    def case_add(rng):
        a, b = _leaf(rng, (3, 4)), _leaf(rng, (4,))
        return [a, b], lambda: _scalarize(ad.add(a, b), np.random.default_rng(1))

    def case_sub(rng):
        a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 1))
        return [a, b], lambda: _scalarize(ad.sub(a, b), np.random.default_rng(2))

    def case_mul(rng):
        a, b = _leaf(rng, (2, 5)), _leaf(rng, (5,))
        return [a, b], lambda: _scalarize(ad.mul(a, b), np.random.default_rng(3))

    def case_neg(rng):
        a = _leaf(rng, (6,))
        return [a], lambda: _scalarize(ad.neg(a), np.random.default_rng(4))

    def case_matmul22(rng):
        a, b = _leaf(rng, (3, 4)), _leaf(rng, (4, 2))
        return [a, b], lambda: _scalarize(ad.matmul(a, b), np.random.default_rng(5))

    def case_matmul12(rng):
        a, b = _leaf(rng, (4,)), _leaf(rng, (4, 3))
        return [a, b], lambda: _scalarize(ad.matmul(a, b), np.random.default_rng(6))

    def case_matmul21(rng):
        a, b = _leaf(rng, (3, 4)), _leaf(rng, (4,))
        return [a, b], lambda: _scalarize(ad.matmul(a, b), np.random.default_rng(7))

    def case_transpose(rng):
        a = _leaf(rng, (3, 5))
        return [a], lambda: _scalarize(ad.transpose(a), np.random.default_rng(8))

    def case_tanh(rng):
        a = _leaf(rng, (4, 3))
        return [a], lambda: _scalarize(ad.tanh(a), np.random.default_rng(9))

    def case_relu(rng):
        a = _away_from_kink(_leaf(rng, (4, 4)))
        return [a], lambda: _scalarize(ad.relu(a), np.random.default_rng(10))

    def case_sigmoid(rng):
        a = _leaf(rng, (5,))
        return [a], lambda: _scalarize(ad.sigmoid(a), np.random.default_rng(11))

    def case_softmax(rng):
        a = _leaf(rng, (3, 6))
        return [a], lambda: _scalarize(ad.softmax(a), np.random.default_rng(12))

    def case_log_softmax(rng):
        a = _leaf(rng, (2, 7))
        return [a], lambda: _scalarize(ad.log_softmax(a), np.random.default_rng(13))

    def case_gather_rows(rng):
        a = _leaf(rng, (6, 3))
        ids = rng.integers(0, 6, size=5)
        return [a], lambda: _scalarize(ad.gather_rows(a, ids),
                                       np.random.default_rng(14))

    def case_take_per_row(rng):
        a = _leaf(rng, (4, 5))
        ids = rng.integers(0, 5, size=4)
        return [a], lambda: _scalarize(ad.take_per_row(a, ids),
                                       np.random.default_rng(15))

    def case_reduce_sum(rng):
        a = _leaf(rng, (3, 3))
        return [a], lambda: ad.reduce_sum(a)

    def case_reduce_mean(rng):
        a = _leaf(rng, (7,))
        return [a], lambda: ad.reduce_mean(ad.mul(a, a))

    def case_dot(rng):
        a, b = _leaf(rng, (6,)), _leaf(rng, (6,))
        return [a, b], lambda: ad.dot(a, b)

    def case_l2_norm(rng):
        a = _leaf(rng, (5,))
        a.data += np.sign(a.data) * 0.1  # stay away from the origin
        return [a], lambda: ad.l2_norm(a)

    def case_cosine_distance(rng):
        a, b = _leaf(rng, (6,)), _leaf(rng, (6,))
        return [a, b], lambda: ad.cosine_distance(a, b)

    def case_cross_entropy(rng):
        a = _leaf(rng, (4, 3))
        labels = rng.integers(0, 3, size=4)
        return [a], lambda: ad.cross_entropy(a, labels)

    def case_composite(rng):
        w1, w2 = _leaf(rng, (4, 5)), _leaf(rng, (5, 3))
        b = _leaf(rng, (5,))
        x = ad.Tensor(rng.normal(size=(2, 4)))
        labels = rng.integers(0, 3, size=2)

        def loss():
            hidden = ad.tanh(ad.add(ad.matmul(x, w1), b))
            return ad.cross_entropy(ad.matmul(hidden, w2), labels)

        return [w1, w2, b], loss

    return [(f.__name__[5:], f) for f in
            (case_add, case_sub, case_mul, case_neg, case_matmul22,
             case_matmul12, case_matmul21, case_transpose, case_tanh,
             case_relu, case_sigmoid, case_softmax, case_log_softmax,
             case_gather_rows, case_take_per_row, case_reduce_sum,
             case_reduce_mean, case_dot, case_l2_norm, case_cosine_distance,
             case_cross_entropy, case_composite)]
