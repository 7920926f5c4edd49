"""Shared oracles for the test-suite: finite differences and naive loops."""

import numpy as np

from galprune import numerics as nx
from galprune.numerics import Tensor

FD_STEP = 1e-5
FD_TOL = 1e-4


def rel_error(a, b, floor=1e-3):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def numeric_grad(f, arrays, i, eps=FD_STEP, only=None):
    """Central differences of scalar f(*arrays) w.r.t. arrays[i].

    ``only`` restricts the work to those flat indices; other entries stay zero.
    """
    base = arrays[i]
    g = np.zeros_like(base)
    flat = range(base.size) if only is None else np.asarray(only).ravel()
    for pos in flat:
        idx = np.unravel_index(int(pos), base.shape)
        old = base[idx]
        base[idx] = old + eps
        up = f(*arrays)
        base[idx] = old - eps
        down = f(*arrays)
        base[idx] = old
        g[idx] = (up - down) / (2 * eps)
    return g


def near_kink(f, arrays, i, select=slice(None), eps=FD_STEP, tol=FD_TOL / 10):
    """True when halving the step changes the difference quotient, i.e. a
    ReLU/max-pool switch lies within the perturbation."""
    only = None if isinstance(select, slice) else select
    a = numeric_grad(f, [x.copy() for x in arrays], i, eps, only)
    b = numeric_grad(f, [x.copy() for x in arrays], i, eps / 2, only)
    return rel_error(a[select], b[select]) > tol


def grad_check(build, arrays, wrt=None, eps=FD_STEP):
    """Largest relative error between reverse-mode and central-difference gradients.

    ``build`` maps Tensors to a scalar Tensor.
    """
    arrays = [np.array(a, dtype=float) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    tensors = [Tensor(a.copy(), requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    loss = build(*tensors)
    nx.backward(loss)

    def f(*arrs):
        with nx.no_grad():
            return float(build(*[Tensor(a) for a in arrs]).data)

    worst = 0.0
    for i in wrt:
        worst = max(worst, rel_error(tensors[i].grad, numeric_grad(f, arrays, i, eps)))
    return worst


def weighted_sum(out: Tensor, rng) -> Tensor:
    """Contract an output with fixed random weights so every Jacobian row is exercised."""
    r = Tensor(rng.standard_normal(out.shape))
    return nx.tsum(out * r)


def naive_conv(x, k, b):
    N, C, H, W = x.shape
    K, _, kh, kw = k.shape
    out = np.zeros((N, K, H - kh + 1, W - kw + 1))
    for n in range(N):
        for o in range(K):
            for i in range(H - kh + 1):
                for j in range(W - kw + 1):
                    acc = 0.0
                    for a in range(kh):
                        for c in range(kw):
                            for ch in range(C):
                                acc += x[n, ch, i + a, j + c] * k[o, ch, a, c]
                    out[n, o, i, j] = acc + b[o]
    return out


def naive_linear(x, w, b):
    out = np.zeros((x.shape[0], w.shape[0]))
    for n in range(x.shape[0]):
        for o in range(w.shape[0]):
            acc = 0.0
            for f in range(w.shape[1]):
                acc += x[n, f] * w[o, f]
            out[n, o] = acc + b[o]
    return out


def naive_maxpool(x):
    N, C, H, W = x.shape
    out = np.zeros((N, C, H // 2, W // 2))
    for n in range(N):
        for c in range(C):
            for i in range(H // 2):
                for j in range(W // 2):
                    best = x[n, c, 2 * i, 2 * j]
                    for a, bb in ((0, 1), (1, 0), (1, 1)):
                        if x[n, c, 2 * i + a, 2 * j + bb] > best:
                            best = x[n, c, 2 * i + a, 2 * j + bb]
                    out[n, c, i, j] = best
    return out


def random_pruned_net(spec, rng, zero_frac=0.4, kinds=None):
    """Masked net with random weights, N(0,1) masks and a random subset forced to exact zero.

    At least one mask entry per host survives. Zeros that would still empty a layer or a whole
    module (through dead rows seen by every reader) are restored one at a time until the mask
    compacts; the degenerate case itself is covered by dedicated error tests.
    """
    from galprune import pruner as pr
    from galprune import networks as nw
    kinds = kinds or [k for k, v in nw.enumerate_structures(spec).items() if v]
    net = nw.attach_masks(spec, kinds, rng, baseline=nw.init_params(spec, rng))
    m = net.mask.values.data
    zero = rng.random(len(m)) < zero_frac
    by_host = {}
    for i, e in enumerate(net.mask.entries):
        by_host.setdefault((e.kind, e.host), []).append(i)
    for idx in by_host.values():
        if all(zero[idx]):
            zero[rng.choice(idx)] = False
    m[zero] = 0.0
    while True:
        try:
            pr.prune(net)
            return net
        except pr.CompactionError:
            zeros = np.flatnonzero(m == 0.0)
            m[rng.choice(zeros)] = rng.standard_normal()


def mask_fd_run(spec, kinds, cases=50, max_discards=5, picks=6):
    """Mask-gradient finite-difference checks on ``cases`` seeds away from kinks.

    Returns (worst relative error, accepted, discarded).
    """
    from galprune import networks as nw
    worst, accepted, discarded, seed = 0.0, 0, 0, 0
    while accepted < cases and discarded <= max_discards:
        rng = np.random.default_rng(seed)
        seed += 1
        net = nw.attach_masks(spec, kinds, rng)
        x = rng.standard_normal((2,) + spec.input_shape)
        r = rng.standard_normal((2, spec.classes))
        pick = rng.choice(len(net.mask), size=min(picks, len(net.mask)), replace=False)
        m0 = net.mask.values.data.copy()

        def f(m):
            net.mask.values.data = m.copy()
            with nx.no_grad():
                return float(np.sum(nw.forward_masked(net, x).data * r))

        if near_kink(f, [m0], 0, pick):
            discarded += 1
            continue
        net.mask.values.data = m0.copy()
        nx.backward(nx.tsum(nw.forward_masked(net, x) * Tensor(r)))
        analytic = net.mask.values.grad.copy()
        numeric = numeric_grad(f, [m0.copy()], 0, only=pick)
        worst = max(worst, rel_error(analytic[pick], numeric[pick]))
        accepted += 1
    return worst, accepted, discarded
