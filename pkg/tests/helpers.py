"""Finite-difference helpers shared by the unit and acceptance suites."""
import numpy as np

from s2ldm.diffnet import grad_check, layer_backward, layer_forward
from s2ldm.diffnet.layers import init_resblock
from s2ldm.diffnet.rng import RngStream

TOL = 1e-4


def away_from_zero(a, margin=0.05):
    # keep relu inputs off the kink so central differences do not straddle it
    return np.where(np.abs(a) < margin, np.sign(a + 1e-12) * margin, a)


def sim_latents(rng, shape, limit=0.99):
    """(..., C, H, W) latent pair whose per-location cosines stay inside (-limit, limit).

    With gamma = 2 the loss is flat to O((1 - s)^2) near s = 1, so a cosine
    at 0.9999 leaves a gradient of ~1e-10 that central differences cannot
    resolve; redraw instead, the way relu inputs are kept off the kink.
    """
    while True:
        e_n, e_c = rng.normal(size=(2, *shape))
        s = np.sum(e_n * e_c, -3) / np.sqrt(np.sum(e_n ** 2, -3) * np.sum(e_c ** 2, -3))
        if np.all(np.abs(s) < limit):
            return e_n, e_c


def rel_err(f, x):
    """grad_check, except where the gradient is identically zero.

    A bias feeding a one-channel group norm cancels exactly; the relative
    error there compares rounding noise, so check the slope absolutely.
    """
    xs = np.array(x, dtype=np.float64)
    _, analytic = f(xs.copy())
    if np.max(np.abs(analytic)) < 1e-12:
        base = f(xs)[0]
        return max(abs(f(xs + 1e-4 * e.reshape(xs.shape))[0] - base) / 1e-4
                   for e in np.eye(xs.size))
    return grad_check(f, xs)


def check_layer(kind, params, x, aux=None, seed=0, **kw):
    """Max error over the input, every parameter and the aux input of one layer."""
    out, _ = layer_forward(kind, params, x, aux=aux, **kw)
    proj = np.random.default_rng(seed).normal(size=out.shape)

    def run(p, xv, av):
        o, cache = layer_forward(kind, p, xv, aux=av, **kw)
        dx, grads = layer_backward(kind, p, cache, proj)
        return float(np.sum(o * proj)), dx, grads

    errs = [rel_err(lambda xv: run(params, xv, aux)[:2], x)]
    for name in params:
        def f(v, name=name):
            val, _, grads = run({**params, name: v}, x, aux)
            return val, grads[name]
        errs.append(rel_err(f, params[name]))
    if aux is not None:
        def f_aux(av):
            val, _, grads = run(params, x, av)
            return val, grads["aux"]
        errs.append(rel_err(f_aux, aux))
    return max(errs)


def shapes(n=10, seed=0):
    rng = np.random.default_rng(seed)
    for i in range(n):
        yield i, rng, int(rng.integers(1, 3)), int(rng.integers(2, 5)) * 2, int(rng.integers(2, 5)) * 2


def _conv(stride):
    def case(i, rng, n, h, w):
        cin, cout = rng.integers(1, 4, 2)
        p = {"w": rng.normal(size=(3, 3, cin, cout)), "b": rng.normal(size=cout)}
        return "conv3x3", p, rng.normal(size=(n, h, w, cin)), None, {"stride": stride}
    return case


def _upconv(i, rng, n, h, w):
    cin, cout = rng.integers(1, 4, 2)
    p = {"w": rng.normal(size=(3, 3, cin, cout)), "b": rng.normal(size=cout)}
    return "upsample2x_then_conv3x3", p, rng.normal(size=(n, h // 2, w // 2, cin)), None, {}


def _group_norm(i, rng, n, h, w):
    groups = int(rng.integers(1, 3))
    c = groups * int(rng.integers(1, 3))
    p = {"gamma": rng.normal(size=c), "beta": rng.normal(size=c)}
    return "group_norm", p, rng.normal(size=(n, h, w, c)), None, {"groups": groups}


def _activation(kind):
    def case(i, rng, n, h, w):
        return kind, {}, away_from_zero(rng.normal(size=(n, h, w, 3))), None, {}
    return case


def _linear(i, rng, n, h, w):
    fin, fout = rng.integers(1, 6, 2)
    p = {"w": rng.normal(size=(fin, fout)), "b": rng.normal(size=fout)}
    return "linear", p, rng.normal(size=(n + 1, fin)), None, {}


def _time_embed(i, rng, n, h, w):
    t = rng.uniform(0.5, 20.0, size=n + 2)
    return "sinusoidal_time_embed", {}, t, None, {"dim": 2 * int(rng.integers(1, 5))}


def _resblock(with_time):
    def case(i, rng, n, h, w):
        cin = 2 * int(rng.integers(1, 3))
        cout = cin if i % 2 else 2 * int(rng.integers(1, 3))
        tdim = 3 if with_time else None
        p = init_resblock(RngStream(i, 1), cin, cout, tdim)
        p = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in p.items()}
        aux = rng.normal(size=(n, tdim)) if with_time else None
        return "residual_block", p, rng.normal(size=(n, h, w, cin)), aux, {"groups": 2}
    return case


LAYER_CASES = {
    "conv3x3": _conv(1),
    "conv3x3_stride2": _conv(2),
    "upsample2x_then_conv3x3": _upconv,
    "group_norm": _group_norm,
    "silu": _activation("silu"),
    "relu": _activation("relu"),
    "tanh": _activation("tanh"),
    "linear": _linear,
    "sinusoidal_time_embed": _time_embed,
    "residual_block": _resblock(False),
    "residual_block_time": _resblock(True),
}


def layer_case_error(name, n=10):
    """Worst grad-check error of one layer case over ``n`` random small shapes."""
    worst = 0.0
    for i, rng, b, h, w in shapes(n):
        kind, p, x, aux, kw = LAYER_CASES[name](i, rng, b, h, w)
        worst = max(worst, check_layer(kind, p, x, aux=aux, **kw))
    return worst


def param_subset_error(params, loss_fn, coords=5, seed=0):
    """grad_check on a random subset of coordinates of each ``Param``.

    ``params`` maps names to Param objects whose ``grad`` was filled by
    ``loss_fn(backward=True)``; ``loss_fn(backward=False)`` only evaluates.
    """
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.zero_grad()
    loss_fn(backward=True)
    errs = {}
    for name, p in params.items():
        idx = rng.choice(p.value.size, size=min(coords, p.value.size), replace=False)
        analytic = p.grad.reshape(-1)[idx].copy()
        base = p.value.copy()

        def f(v, p=p, idx=idx, base=base, analytic=analytic):
            w = base.copy()
            w.reshape(-1)[idx] = v
            p.value = w
            try:
                return loss_fn(backward=False), analytic
            finally:
                p.value = base

        errs[name] = grad_check(f, base.reshape(-1)[idx])
    return errs
