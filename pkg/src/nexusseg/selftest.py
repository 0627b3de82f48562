"""Finite-difference gradient checking and a quick invariant self-test suite."""
import os
import tempfile

import numpy as np

from . import layers as L
from .evaluation import REGIONS, evaluate, morph_cleanup
from .loss import LossConfig, nll_loss
from .models import ARCHITECTURES, ModelConfig, build_model, check_dims, load_checkpoint, save_checkpoint
from .optim import SGD
from .tensor import new_rng


def rel_error(a, b):
    """``||a - b|| / (||a|| + ||b||)``, 0 when both vanish."""
    a, b = np.ravel(a), np.ravel(b)
    den = np.linalg.norm(a) + np.linalg.norm(b)
    return 0.0 if den == 0 else float(np.linalg.norm(a - b) / den)


def numeric_grad(f, x, eps=1e-6):
    """Central differences of scalar ``f()`` with respect to array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return g


def check_layer(layer, x, rng, train=True, eps=1e-6):
    """Worst relative error over the input and every parameter for
    ``sum(R * layer(x))`` with a random projection ``R``."""
    x = np.array(x, dtype=np.float64)
    out = layer.forward(x, train=train)
    r = rng.normal(size=out.shape)

    def objective():
        return float((layer.forward(x, train=train) * r).sum())

    layer.forward(x, train=train)
    dx = layer.backward(r)
    analytic = {k: layer.grads[k].copy() for k in layer.params}
    errs = {"input": rel_error(dx, numeric_grad(objective, x, eps))}
    for k, p in layer.params.items():
        errs[k] = rel_error(analytic[k], numeric_grad(objective, p, eps))
    return max(errs.values()), errs


def check_softmax_nll(logits, targets, weights=None, eps=1e-6):
    logits = np.array(logits, dtype=np.float64)
    cfg = LossConfig(weights or {})

    def objective():
        return nll_loss(L.softmax(logits, axis=1), targets, cfg).loss

    analytic = nll_loss(L.softmax(logits, axis=1), targets, cfg).grad_logits
    return rel_error(analytic, numeric_grad(objective, logits, eps))


def layer_cases(rng):
    """One random small instance per layer kind: ``(name, layer, input, train)``."""
    n = int(rng.integers(2, 4))
    c = int(rng.integers(1, 4))
    k = int(rng.choice([1, 3, 5]))
    h = int(rng.integers(k, k + 4))
    yield "conv", L.Conv2D(c, int(rng.integers(1, 4)), k, rng=rng, bias=rng.normal()), rng.normal(size=(n, c, h, h)), True
    p = int(rng.integers(1, 4))
    s = int(rng.integers(1, 3))
    yield "pool", L.MaxPool2D(p, s), rng.normal(size=(n, c, p + 3, p + 4)), True
    x = rng.normal(size=(n, c, 4, 4))
    x[np.abs(x) < 1e-3] = 0.5  # keep clear of the kink
    yield "relu", L.ReLU(), x, True
    g = int(rng.integers(1, 4))
    yield "maxout", L.Maxout(g), rng.normal(size=(n, g * c, 3, 3)), True
    bn = L.BatchNorm(c)
    bn.params["scale"] = rng.normal(size=c)
    bn.params["shift"] = rng.normal(size=c)
    yield "batchnorm", bn, rng.normal(1.0, 2.0, size=(n + 1, c, 3, 3)), True
    f = int(rng.integers(2, 9))
    yield "dense", L.Dense(f, int(rng.integers(2, 6)), rng=rng, bias=0.1), rng.normal(size=(n, f)), True
    yield "softmax", L.Softmax(), rng.normal(size=(n, 5, 2, 2)), True


def _metric_oracle_case(rng, size=32):
    a = rng.integers(0, 5, size=(size, size))
    b = rng.integers(0, 5, size=(size, size))
    rep = evaluate(a, b)
    for region, members in REGIONS.items():
        tp = fp = tn = fn = 0
        for i in range(size):
            for j in range(size):
                pl, gl = a[i, j] in members, b[i, j] in members
                tp += pl and gl
                fp += pl and not gl
                fn += gl and not pl
                tn += not pl and not gl
        s = rep[region]
        if (s.tp, s.fp, s.tn, s.fn) != (tp, fp, tn, fn):
            return False
        if tp + fn and abs(s.dice - 2 * tp / (2 * tp + fp + fn)) > 1e-12:
            return False
    return True


def run_selftest(seed=0, log=print):
    """Run the quick invariant checks; returns a list of ``(name, ok, detail)``."""
    rng = new_rng(seed)
    results = []

    def record(name, ok, detail=""):
        results.append((name, bool(ok), detail))
        log(f"{'PASS' if ok else 'FAIL'} {name} {detail}".rstrip())

    for name in ARCHITECTURES:
        try:
            check_dims(build_model(name, ModelConfig(width=4), rng=rng, check=False))
            record(f"check_dims {name}", True)
        except Exception as e:  # report and continue
            record(f"check_dims {name}", False, str(e).splitlines()[0])

    worst = {}
    for _ in range(3):
        for name, layer, x, train in layer_cases(rng):
            err, _ = check_layer(layer, x, rng, train)
            worst[name] = max(worst.get(name, 0.0), err)
    worst["softmax+nll"] = max(
        check_softmax_nll(rng.normal(size=(4, 5)), rng.integers(0, 5, 4), {0: 8, 2: 2}) for _ in range(3)
    )
    for name, err in worst.items():
        record(f"gradient {name}", err < 1e-4, f"rel {err:.2e}")

    record("metric oracle", all(_metric_oracle_case(rng, 16) for _ in range(20)))

    opt = SGD(0.1, 0.9, "nesterov")
    theta = {"t": np.array([1.0])}
    for _ in range(300):
        opt.minimize_step(theta, lambda p: {"t": 2 * p["t"]})
    record("nesterov on quadratic", abs(theta["t"][0]) < 1e-3, f"theta {theta['t'][0]:.2e}")

    m = np.zeros((12, 12), np.uint8)
    m[1, 1] = 3
    m[2:12, 2:12] = 2
    want = m.copy()
    want[1, 1] = 0
    m[6, 6] = 0
    record("morphology", np.array_equal(morph_cleanup(m), want))

    model = build_model("LN", ModelConfig(width=4), rng=rng)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "a.nxck")
        save_checkpoint(model, path)
        again = os.path.join(d, "b.nxck")
        save_checkpoint(load_checkpoint(path), again)
        with open(path, "rb") as f1, open(again, "rb") as f2:
            record("checkpoint round trip", f1.read() == f2.read())
    return results


def selftest_ok(results):
    return all(ok for _, ok, _ in results)


__all__ = ["rel_error", "numeric_grad", "check_layer", "check_softmax_nll", "layer_cases", "run_selftest", "selftest_ok"]
