"""Gradient verification: closed-form adjoints, decomposition and batch invariance.

Every check returns a :class:`CheckResult` with the measured error so the
CLI can write a report. The tiny instance used for end-to-end checks has a
single editable layer with 4 inputs and 6 outputs, 6 cached tokens and a
rank-4 editor; :func:`tiny_instance` builds it deterministically and the
committed fixture stores brute-force finite-difference gradients for it.
"""
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import io, lm
from .aggregate import aggregate_normal_eq
from .hypernet import HyperNetwork, init_hypernetwork, layer_shapes_of
from .metagrad import (accumulate_editor_gradient, grad_wrt_lambda, grad_wrt_value_diffs,
                       meta_loss_value, monolithic_editor_gradient)

FIXTURE_DIR = os.path.join(os.path.dirname(__file__), "data")
LAMBDAS = (1e-3, 0.5, 10.0)


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_rel_err: float
    tol: float
    detail: str = ""


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def dict_rel_err(a, b):
    """Max-abs error over all entries relative to the largest reference entry."""
    num = max(float(np.max(np.abs(a[k] - b[k]))) for k in b)
    den = max(float(np.max(np.abs(b[k]))) for k in b)
    return num / max(den, 1e-300)


# --------------------------------------------------------- closed forms

def _central(f, x, eps):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp = x.copy()
        xp[i] += eps
        xm = x.copy()
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


def random_instance(rng, lam=None):
    d, dp = (int(v) for v in rng.integers(1, 9, 2))
    n = int(rng.integers(1, 13))
    lam = float(rng.choice(LAMBDAS)) if lam is None else lam
    return rng.normal(size=(d, n)), rng.normal(size=(dp, n)), rng.normal(size=(dp, d)), lam


def check_value_diff_adjoint(U, D, G, lam, eps=1e-2):
    """Closed-form ``dL/dD`` against central differences of ``<G, S*(D)>``; returns the relative error."""
    f = lambda Dx: float(np.sum(G * aggregate_normal_eq(U, Dx, lam)))  # noqa: E731
    # the map is linear in D, so the central difference is exact up to rounding
    return rel_err(grad_wrt_value_diffs(G, U, lam), _central(f, D, eps))


def check_lambda_adjoint(U, D, G, lam):
    """Returns ``(fd_rel_err, form_rel_err)`` for ``dL/dlam``."""
    S = aggregate_normal_eq(U, D, lam)
    a = grad_wrt_lambda(G, U, lam, S)
    b = grad_wrt_lambda(G, U, lam, S, D, form="inverse-squared")
    f = lambda x: float(np.sum(G * aggregate_normal_eq(U, D, x)))  # noqa: E731
    # Richardson-extrapolated central difference with a step relative to lam
    h = 1e-3 * lam
    d1 = (f(lam + h) - f(lam - h)) / (2 * h)
    d2 = (f(lam + h / 2) - f(lam - h / 2)) / h
    fd = (4 * d2 - d1) / 3
    return abs(a - fd) / max(abs(fd), 1e-300), abs(a - b) / max(abs(b), 1e-300)


def check_theorems(n_instances=24, seed=0, tol=1e-6, form_tol=1e-10):
    rng = np.random.default_rng(seed)
    worst_d = worst_l = worst_f = 0.0
    for i in range(n_instances):
        U, D, G, lam = random_instance(rng, LAMBDAS[i % len(LAMBDAS)])
        worst_d = max(worst_d, check_value_diff_adjoint(U, D, G, lam))
        e_fd, e_form = check_lambda_adjoint(U, D, G, lam)
        worst_l = max(worst_l, e_fd)
        worst_f = max(worst_f, e_form)
    return [
        CheckResult("value-difference adjoint vs finite differences", worst_d <= tol, worst_d, tol,
                    f"{n_instances} instances"),
        CheckResult("regularizer derivative vs finite differences", worst_l <= tol, worst_l, tol,
                    f"{n_instances} instances"),
        CheckResult("regularizer derivative: two algebraic forms agree", worst_f <= form_tol, worst_f, form_tol,
                    f"{n_instances} instances"),
    ]


# ------------------------------------------------------------ tiny instance

@dataclass
class TinyInstance:
    model: lm.EditableModel
    editor: HyperNetwork
    edit: lm.Batch
    equiv: lm.Batch
    unrel: lm.Batch


def _random_batch(rng, n, vocab, prompt_len, answer_len):
    return lm.Batch(tuple(tuple(int(t) for t in rng.integers(1, vocab, prompt_len)) for _ in range(n)),
                    tuple(tuple(int(t) for t in rng.integers(1, vocab, answer_len)) for _ in range(n)))


def tiny_instance(seed=0, *, aggregation="normal_eq"):
    """One editable layer (4 -> 6), 6 cached tokens, rank-4 editor with smooth activations."""
    rng = np.random.default_rng(seed)
    vocab = 11
    model = lm.init_model(vocab, width=4, hidden=6, n_blocks=1, max_len=6, nonlinearity="tanh", seed=seed,
                          editable_policy="first-fc-last-k", last_k=1)
    edit = _random_batch(rng, 3, vocab, 3, 2)
    equiv = _random_batch(rng, 3, vocab, 3, 2)
    unrel = _random_batch(rng, 3, vocab, 4, 1)
    h = init_hypernetwork(layer_shapes_of(model), rank=4, blocks=2, eta_init=0.2, lambda_init=0.3, seed=seed + 1,
                          activation="tanh")
    # leave the identity initialization so every parameter carries gradient
    for name, value in h.params.items():
        if name.endswith((".up", ".up_bias", ".down_bias")):
            h.params[name] = rng.normal(0.0, 0.3, size=value.shape)
        elif name.endswith((".scale", ".shift")):
            h.params[name] = value + rng.normal(0.0, 0.1, size=value.shape)
    _, cache = lm.forward_with_cache(model, edit)
    h.update_normalizer(cache)
    return TinyInstance(model, h, edit, equiv, unrel)


def fd_editor_gradient(inst, *, eps=1e-6, aggregation="normal_eq", loc_coeff=1.0):
    """Brute-force central differences of the forward-only meta loss in every editor parameter."""
    h = inst.editor
    out = {}
    for name, value in h.params.items():
        g = np.zeros_like(value, dtype=np.float64)
        for idx in np.ndindex(value.shape if value.ndim else ()):
            vals = []
            for sgn in (1.0, -1.0):
                p = dict(h.params)
                arr = np.array(value, dtype=np.float64)
                arr[idx] += sgn * eps
                p[name] = arr
                vals.append(meta_loss_value(h.with_params(p), inst.model, inst.edit, inst.equiv, inst.unrel,
                                            aggregation=aggregation, loc_coeff=loc_coeff))
            g[idx] = (vals[0] - vals[1]) / (2 * eps)
        out[name] = g
    return out


def save_fixture(directory, inst, fd_grads, eps):
    os.makedirs(directory, exist_ok=True)
    inst.model.save(os.path.join(directory, "tiny_model.bin"))
    inst.editor.save(os.path.join(directory, "tiny_editor.bin"))
    batches = {k: [list(map(list, b.prompts)), list(map(list, b.answers))]
               for k, b in (("edit", inst.edit), ("equiv", inst.equiv), ("unrel", inst.unrel))}
    io.save_arrays(os.path.join(directory, "tiny_fd_grads.bin"),
                   {"kind": "fd_gradients", "eps": eps, "batches": batches},
                   {f"fd/{k}": v for k, v in fd_grads.items()})


def load_fixture(directory=FIXTURE_DIR):
    model = lm.EditableModel.load(os.path.join(directory, "tiny_model.bin"))
    editor = HyperNetwork.load(os.path.join(directory, "tiny_editor.bin"))
    meta, arrays = io.load_arrays(os.path.join(directory, "tiny_fd_grads.bin"))
    b = {k: lm.Batch(tuple(map(tuple, v[0])), tuple(map(tuple, v[1]))) for k, v in meta["batches"].items()}
    fd = {k[3:]: v for k, v in arrays.items() if k.startswith("fd/")}
    return TinyInstance(model, editor, b["edit"], b["equiv"], b["unrel"]), fd


# --------------------------------------------------------- end-to-end checks

def check_decomposition(inst, tol=1e-6, aggregation="normal_eq"):
    dec, _, _ = accumulate_editor_gradient(inst.editor, inst.model, inst.edit, inst.equiv, inst.unrel,
                                           aggregation=aggregation)
    mono, _ = monolithic_editor_gradient(inst.editor, inst.model, inst.edit, inst.equiv, inst.unrel,
                                         aggregation=aggregation)
    err = dict_rel_err(dec, mono)
    return CheckResult(f"decomposed vs monolithic gradient ({aggregation})", err <= tol, err, tol)


def check_batch_invariance(inst, tol=1e-8, sizes=None):
    _, cache = lm.forward_with_cache(inst.model, inst.edit)
    sizes = sizes or (1, 2, cache.n)
    grads = [accumulate_editor_gradient(inst.editor, inst.model, inst.edit, inst.equiv, inst.unrel, s)[0]
             for s in sizes]
    err = max(dict_rel_err(g, grads[-1]) for g in grads[:-1])
    return CheckResult(f"sub-batch invariance over sizes {list(sizes)}", err <= tol, err, tol)


def check_against_fd(inst, fd, tol=1e-6):
    dec, _, _ = accumulate_editor_gradient(inst.editor, inst.model, inst.edit, inst.equiv, inst.unrel)
    err = dict_rel_err(dec, fd)
    return CheckResult("decomposed gradient vs stored finite differences", err <= tol, err, tol)


def run_all(fixture_dir=FIXTURE_DIR, seed=0):
    results = check_theorems(seed=seed)
    inst, fd = load_fixture(fixture_dir)
    results.append(check_against_fd(inst, fd))
    results.append(check_decomposition(inst))
    results.append(check_decomposition(inst, aggregation="sum"))
    results.append(check_batch_invariance(inst))
    return results


def write_report(results, path):
    report = {"passed": all(r.passed for r in results), "checks": [asdict(r) for r in results]}
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    return report
