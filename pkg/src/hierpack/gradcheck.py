"""Central finite-difference checks of every differentiable operation.

Each case draws unit-scale random inputs, reduces the op output to a scalar
with a fixed random projection, and compares the tape gradient with
``(f(x + h e) - f(x - h e)) / 2h``. The error is norm-wise relative:
``|g_tape - g_fd| / max(|g_tape|, |g_fd|, 1e-12)``.

The end-to-end check runs a small model (backbone, necks, heads of all five
task kinds, and the backpack path) and compares directional derivatives along
random directions plus a random sample of single coordinates, since a full
coordinate sweep over every parameter would dominate the runtime.
"""

from __future__ import annotations

import time
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

H = 1e-6
OP_TOLERANCE = 1e-6
E2E_TOLERANCE = 1e-5


@dataclass
class CheckResult:
    name: str
    instances: int
    max_error: float
    tolerance: float
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.max_error <= self.tolerance)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.ravel(a)
    b = np.ravel(b)
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / den)


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = H) -> np.ndarray:
    """Central differences of ``f`` with respect to every entry of ``x`` (in place)."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        hi = f()
        flat[i] = keep - h
        lo = f()
        flat[i] = keep
        gf[i] = (hi - lo) / (2 * h)
    return g


def _away_from_zero(rng, shape, margin=0.05):
    """Unit-scale values with |x| >= margin, keeping kinks outside the stencil."""
    x = rng.uniform(margin, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng, shape):
    """Values whose pairwise gaps exceed the stencil (no ties for max)."""
    n = int(np.prod(shape))
    vals = rng.permutation(n) / n * 3.0 - 1.5 + rng.uniform(0, 0.5 / n, size=n)
    return vals.reshape(shape)


def check_case(fn: Callable, inputs: list[np.ndarray], rng, h: float = H) -> float:
    """Max relative error over all inputs of ``sum(fn(*inputs) * R)``."""
    tensors = [dc.Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = fn(*tensors)
    proj = rng.normal(size=out.shape)
    dc.mul(out, proj).backward() if out.data.ndim == 0 else dc.sum_(dc.mul(out, proj)).backward()
    worst = 0.0
    arrays = [x.copy() for x in inputs]

    def f():
        with dc.no_grad():
            return float(np.sum(fn(*[dc.Tensor(a) for a in arrays]).data * proj))

    for t, a in zip(tensors, arrays):
        worst = max(worst, relative_error(t.grad, numeric_grad(f, a, h)))
    return worst


def _seg_ids(rng, n, s):
    ids = rng.integers(0, s, size=n)
    ids[:s] = np.arange(s)  # no empty segments
    return rng.permutation(ids)


def op_cases() -> dict[str, Callable]:
    """name -> rng -> (fn, inputs). Shapes vary per instance."""

    def shape(rng):
        return int(rng.integers(1, 5)), int(rng.integers(1, 5))

    def matmul(rng):
        n, d = shape(rng)
        k = int(rng.integers(1, 5))
        return dc.matmul, [rng.normal(size=(n, d)), rng.normal(size=(d, k))]

    def binary(op):
        def case(rng):
            n, d = shape(rng)
            other = (d,) if rng.random() < 0.5 else (n, d)  # exercise broadcasting
            return op, [rng.normal(size=(n, d)), rng.normal(size=other)]
        return case

    def unary(op, sample=None):
        def case(rng):
            n, d = shape(rng)
            x = sample(rng, (n, d)) if sample else rng.normal(size=(n, d))
            return op, [x]
        return case

    def seg_mean(rng):
        n, d = shape(rng)
        n += 3
        s = int(rng.integers(1, min(n, 4) + 1))
        ids = _seg_ids(rng, n, s)
        return (lambda x: dc.segment_mean(x, ids, s)), [rng.normal(size=(n, d))]

    def seg_max(rng):
        n, d = shape(rng)
        n += 3
        s = int(rng.integers(1, min(n, 4) + 1))
        ids = _seg_ids(rng, n, s)
        return (lambda x: dc.segment_max(x, ids, s)), [_distinct(rng, (n, d))]

    def gather(rng):
        n, d = shape(rng)
        idx = rng.integers(0, n, size=int(rng.integers(1, 8)))  # repeats accumulate
        return (lambda x: dc.gather_rows(x, idx)), [rng.normal(size=(n, d))]

    def concat(rng):
        n, d = shape(rng)
        m = int(rng.integers(1, 5))
        return (lambda a, b: dc.concat_rows([a, b])), [rng.normal(size=(n, d)), rng.normal(size=(m, d))]

    def cols(rng):
        n, d = shape(rng)
        d += 2
        lo = int(rng.integers(0, d - 1))
        hi = int(rng.integers(lo + 1, d + 1))
        return (lambda x: dc.columns(x, lo, hi)), [rng.normal(size=(n, d))]

    def resh(rng):
        n, d = shape(rng)
        return (lambda x: dc.reshape(x, (d, n))), [rng.normal(size=(n, d))]

    def lin(rng):
        n, d = shape(rng)
        k = int(rng.integers(1, 5))
        return dc.linear, [rng.normal(size=(n, d)), rng.normal(size=(d, k)), rng.normal(size=(k,))]

    def xent(rng):
        b, k = shape(rng)
        k += 1
        target = rng.integers(0, k, size=b)
        mask = None
        if rng.random() < 0.5:
            mask = rng.random((b, k)) < 0.7
            mask[np.arange(b), target] = True
        return (lambda s: dc.cross_entropy(s, target, mask=mask)), [rng.normal(size=(b, k))]

    def bce(rng):
        n, d = shape(rng)
        t = (rng.random((n, d)) < 0.5).astype(float)
        return (lambda z: dc.binary_ce(z, t)), [2 * rng.normal(size=(n, d))]

    def mse(rng):
        n, d = shape(rng)
        t = rng.normal(size=(n, d))
        return (lambda p: dc.mse(p, t)), [rng.normal(size=(n, d))]

    return {
        "matmul": matmul,
        "add": binary(dc.add),
        "sub": binary(dc.sub),
        "mul": binary(dc.mul),
        "abs": unary(dc.abs_, _away_from_zero),
        "relu": unary(dc.relu, _away_from_zero),
        "softplus": unary(dc.softplus),
        "identity": unary(dc.identity),
        "segment_mean": seg_mean,
        "segment_max": seg_max,
        "gather_rows": gather,
        "concat_rows": concat,
        "columns": cols,
        "reshape": resh,
        "sum": unary(dc.sum_),
        "mean": unary(dc.mean),
        "linear": lin,
        "cross_entropy": xent,
        "binary_ce": bce,
        "mse": mse,
        "tdgc_layer": _tdgc_case,
        "interact": _interact_case,
    }


def _tdgc_case(rng):
    from .backbone import init_layer, layer_params, tdgc_forward
    from .tgraph import build_graph

    n, d = int(rng.integers(2, 7)), int(rng.integers(1, 4))
    pe = np.cumsum(rng.uniform(0.3, 1.5, size=n))
    store = dc.ParameterStore()
    init_layer(store, "t.", d, 3, rng)
    p = layer_params(store, "t.")
    keys = list(p)
    stage = int(rng.integers(0, 3))

    def fn(x, *weights):
        g = build_graph(x, pe, tau=1.5, stage=stage)
        return tdgc_forward(g, dict(zip(keys, weights)), dc.softplus)

    return fn, [rng.normal(size=(n, d))] + [p[k].data.copy() for k in keys]


def _interact_case(rng):
    from .backpack import PrototypeSet, interact

    q, d, p = int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(2, 6))
    protos = PrototypeSet("t", rng.normal(size=(p, d)), np.stack([np.arange(p), np.arange(p)], 1))
    k = int(rng.integers(1, p + 1))
    M = int(rng.integers(1, 3))
    names = [f"m{m}.{w}" for m in range(M) for w in ("W_r", "W")]

    def fn(x, *ws):
        store = dict(zip((f"i.{n}" for n in names), ws))
        return interact(x, protos, store, "i.", M, k).refined

    return fn, [rng.normal(size=(q, d))] + [rng.normal(size=(d, d)) / np.sqrt(d) for _ in names]


def run_op_suite(instances: int = 20, seed: int = 0, h: float = H) -> list[CheckResult]:
    results = []
    for name, case in op_cases().items():
        rng = np.random.default_rng([seed, sum(map(ord, name))])
        t0 = time.perf_counter()
        worst = 0.0
        for _ in range(instances):
            fn, inputs = case(rng)
            worst = max(worst, check_case(fn, inputs, rng, h))
        results.append(CheckResult(name, instances, worst, OP_TOLERANCE, time.perf_counter() - t0))
    return results


# ---------------------------------------------------------------- end to end


def _tiny_model(rng, seed: int):
    from .backbone import BackboneConfig
    from .data import GenConfig, script_video, vocabulary
    from .model import BackpackConfig, HierModel, build_prototypes

    gen = GenConfig(videos=2, verbs=3, nouns=4, actions=5, dim=4, min_segments=10,
                    max_segments=14, val_fraction=0.0, horizon=2)
    vocab = vocabulary(gen, seed)
    videos = [script_video(gen, vocab, seed, i) for i in range(2)]
    from .tasks import default_tasks
    specs = default_tasks(gen.verbs, gen.nouns, gen.verbs, gen.horizon)
    pooling = "max" if rng.random() < 0.5 else "mean"
    cfg = BackboneConfig(L=3, layers_per_stage=[1, 1, 1], D=gen.dim, tau=2.0, pooling=pooling,
                         gate_hidden=3)
    novel = str(rng.choice(["oscc", "pnr", "lta", "mq"]))
    support = [t for t in ("ar", "oscc", "pnr", "lta", "mq") if t != novel]
    model = HierModel(cfg, specs, support, seed, activation=dc.softplus)
    model.prototypes = build_prototypes(model, videos, cfg.tau)
    fusion = "logits" if rng.random() < 0.5 else "features"
    model.attach_novel(novel, specs[novel], BackpackConfig(k=2, M=2, fusion=fusion), seed)
    return model, videos, support


def end_to_end(instances: int = 20, seed: int = 0, h: float = H, directions: int = 3,
               coordinates: int = 12) -> CheckResult:
    """Backbone-to-loss gradient of every task plus the backpack path."""
    from .model import make_batch

    t0 = time.perf_counter()
    worst = 0.0
    for i in range(instances):
        rng = np.random.default_rng([seed, 7919, i])
        model, videos, support = _tiny_model(rng, seed * 1000 + i)
        batch = make_batch(videos, support + [model.novel], model.cfg.tau)
        names = model.store.names()
        params = [model.store[n] for n in names]

        def loss():
            parts = list(model.losses(batch, support).values()) + [model.novel_loss(batch)]
            total = parts[0]
            for p in parts[1:]:
                total = dc.add(total, p)
            return total

        model.store.zero_grad()
        loss().backward()
        grads = [p.grad.copy() for p in params]

        def value():
            with dc.no_grad():
                return float(loss().data)

        analytic, numeric = [], []
        for _ in range(directions):
            v = [rng.normal(size=p.shape) for p in params]
            analytic.append(sum(float(np.sum(g * d)) for g, d in zip(grads, v)))
            for p, d in zip(params, v):
                p.data += h * d
            hi = value()
            for p, d in zip(params, v):
                p.data -= 2 * h * d
            lo = value()
            for p, d in zip(params, v):
                p.data += h * d
            numeric.append((hi - lo) / (2 * h))
        for _ in range(coordinates):
            j = int(rng.integers(len(params)))
            flat = params[j].data.reshape(-1)
            c = int(rng.integers(flat.size))
            analytic.append(float(grads[j].reshape(-1)[c]))
            keep = flat[c]
            flat[c] = keep + h
            hi = value()
            flat[c] = keep - h
            lo = value()
            flat[c] = keep
            numeric.append((hi - lo) / (2 * h))
        worst = max(worst, relative_error(np.array(analytic), np.array(numeric)))
    return CheckResult("end_to_end", instances, worst, E2E_TOLERANCE, time.perf_counter() - t0)


def run_all(instances: int = 20, seed: int = 0) -> list[CheckResult]:
    return run_op_suite(instances, seed) + [end_to_end(instances, seed)]
