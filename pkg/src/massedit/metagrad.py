"""Decomposed meta-gradient for training the editor.

The meta loss depends on the hyper-network only through the edited weights
``W + S*``. Back-propagating it on the LM gives ``G = dL/dW~`` per layer,
whose size does not depend on the number of edits. Two closed forms then
carry ``G`` back through the normal equation:

    dL/dD      = G (U U^T + lam I)^{-1} U           (columns on demand)
    dL/dlam    = -tr(G (U U^T + lam I)^{-1} S*^T)

and the hyper-network gradient is obtained by back-propagating the proxy
``sum_j dL/dd_j . d_j`` over blocks of cached tuples. Nothing retains a
graph across blocks, so working memory is set by the block size.

:func:`monolithic_editor_gradient` differentiates the same loss end to end
in one graph and serves as the reference.
"""
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels, lm, memory
from .aggregate import NormalEquation, SPDFactor, dual_factor, residual_array
from .errors import SingularMatrixError
from .hypernet import proxy_backward, shift_proxy_backward


def _factor(U, lam, factor):
    if factor is not None:
        return factor
    if not lam > 0:
        raise ValueError(f"regularizer must be positive, got {lam}")
    U = np.asarray(U, dtype=np.float64)
    return SPDFactor(U @ U.T + lam * np.eye(U.shape[0]))


def grad_wrt_value_diffs(weight_grad, U, lam, *, factor=None):
    """Gradient with respect to ``D`` (``d' x n``) of a loss whose gradient in ``S*`` is ``weight_grad``."""
    M = _factor(U, lam, factor).solve_right(weight_grad)
    return M @ np.asarray(U)


def grad_wrt_lambda(weight_grad, U, lam, S, D=None, *, factor=None, form="shift"):
    """``dL/dlam`` for the normal-equation shift ``S``.

    ``form="shift"`` evaluates ``-tr(M S^T)`` with ``M = G A^{-1}``;
    ``form="inverse-squared"`` evaluates ``-tr(G A^{-2} U D^T)`` and needs ``D``.
    """
    fac = _factor(U, lam, factor)
    M = fac.solve_right(weight_grad)
    if form == "shift":
        return -float(np.sum(M * S))
    if form == "inverse-squared":
        if D is None:
            raise ValueError("the inverse-squared form needs D")
        U = np.asarray(U, dtype=np.float64)
        D = np.asarray(D, dtype=np.float64)
        if U.shape[1] < U.shape[0]:
            # (U U^T + lam I)^{-2} U = U (U^T U + lam I)^{-2}
            dual = dual_factor(U, lam)
            return -float(np.sum(weight_grad * (dual.solve_right(dual.solve_right(D)) @ U.T)))
        return -float(np.trace(fac.solve_right(M) @ U @ D.T))
    raise ValueError(f"unknown form {form!r}")


@dataclass
class MetaAdjoint:
    """Per-layer ``M = G (U U^T + lam I)^{-1}`` and ``dL/dlam``."""
    M: dict
    lambda_grads: dict

    def d_grads(self, layer, keys_rows):
        """``dL/dd_j = M u_j`` for a block of keys given as rows."""
        return keys_rows @ self.M[layer].T


# ------------------------------------------------------------ editor inference

def streaming_shifts(h, cache, method, sub_batch_size=None):
    """Aggregate shifts without retaining any per-token intermediate.

    Returns ``{layer: (shift, factor_or_None)}``.
    """
    out = {}
    with ad.no_grad():
        for layer in cache.layers:
            d, dp = h.layer_shapes[layer]
            params = h.tensors(h.param_names(layer))
            eta = h.eta(layer)
            if method == "normal_eq":
                eq = NormalEquation(d, dp)
                for _, keys, grads in cache.blocks(layer, sub_batch_size):
                    pk, pg = h.factor_graph(layer, keys, grads, params)
                    diffs, _ = kernels.value_differences(pk.data, keys, pg.data, eta)
                    eq.add(keys, diffs)
                try:
                    shift, fac = eq.solve(h.lam(layer))
                except SingularMatrixError as exc:
                    exc.layer = layer
                    raise
                out[layer] = (shift, fac)
            elif method == "sum":
                shift = memory.track(np.zeros((dp, d)))
                for _, keys, grads in cache.blocks(layer, sub_batch_size):
                    pk, pg = h.factor_graph(layer, keys, grads, params)
                    shift += -eta * (pg.data.T @ pk.data)
                out[layer] = (shift, None)
            else:
                raise ValueError(f"unknown aggregation method {method!r}")
    return out


def accumulate_editor_gradient(h, model, edit_batch, equiv_batch, unrel_batch, sub_batch_size=None, *,
                               token_policy="answer", aggregation="normal_eq", loc_coeff=1.0, cache=None):
    """Hyper-network gradient of the meta loss, assembled in decomposed stages.

    Returns ``(grads, meta_loss, diagnostics)``; ``grads`` is shaped like
    ``h.params``. ``sub_batch_size`` bounds both the LM chunks and the
    blocks of cached tuples fed to the hyper-network.
    """
    if sub_batch_size is not None and sub_batch_size < 1:
        raise ValueError("sub_batch_size must be >= 1")
    if tuple(model.editable_set) != tuple(h.layers):
        raise ValueError("hyper-network layers do not match the model's editable set")
    if cache is None:
        edit_loss, cache = lm.forward_with_cache(model, edit_batch, token_policy, sub_batch_size=sub_batch_size)
    else:
        edit_loss = None

    # editor inference
    shifts = streaming_shifts(h, cache, aggregation, sub_batch_size)
    post = lm.apply_shifts(model, {l: s for l, (s, _) in shifts.items()})

    # meta loss on the edited LM
    meta_loss, wgrads, parts = lm.meta_backward_on_weights(
        model, post, equiv_batch, unrel_batch, loc_coeff, sub_batch_size=sub_batch_size
    )

    residuals = {}

    def observe(layer, start, keys, diffs):
        residuals.setdefault(layer, []).append(residual_array(shifts[layer][0], keys, diffs))

    if aggregation == "normal_eq":
        adj = MetaAdjoint({}, {})
        for layer, (shift, fac) in shifts.items():
            M = fac.solve_right(wgrads[layer])
            adj.M[layer] = M
            adj.lambda_grads[layer] = -float(np.sum(M * shift))
        grads = proxy_backward(
            h, cache,
            {l: (lambda start, keys, l=l: adj.d_grads(l, keys)) for l in cache.layers},
            sub_batch_size=sub_batch_size, observer=observe,
        )
        for layer, g in adj.lambda_grads.items():
            # chain rule through lam = exp(log_lambda)
            grads[f"layer.{layer}.log_lambda"] = np.array(h.lam(layer) * g)
    else:
        adj = None
        grads = shift_proxy_backward(h, cache, wgrads, sub_batch_size=sub_batch_size, observer=observe)

    res = {l: np.concatenate(r) for l, r in residuals.items()}
    finite = [r[np.isfinite(r)] for r in res.values()]
    n_ok = sum(len(r) for r in finite)
    diagnostics = {
        "gen_loss": parts["gen"],
        "loc_loss": parts["loc"],
        "meta_loss": meta_loss,
        "edit_loss": edit_loss,
        "n_tokens": cache.n,
        "shift_norm": {l: float(np.linalg.norm(s)) for l, (s, _) in shifts.items()},
        "lambda": {l: h.lam(l) for l in cache.layers},
        "mr": (sum(float(r.sum()) for r in finite) / n_ok) if n_ok else float("nan"),
        "mr_excluded": sum(int(np.isnan(r).sum()) for r in res.values()),
        "residuals": res,
        "lambda_grads": adj.lambda_grads if adj is not None else {},
        "cache_bytes": cache.nbytes(),
    }
    return grads, meta_loss, diagnostics


# ------------------------------------------------------------ reference path

def monolithic_editor_gradient(h, model, edit_batch, equiv_batch, unrel_batch, *, token_policy="answer",
                               aggregation="normal_eq", loc_coeff=1.0, cache=None):
    """Same gradient as :func:`accumulate_editor_gradient` from one retained graph.

    The hyper-network runs on every cached tuple with its graph kept, the
    shift is formed with a differentiable solve, and the meta loss is
    back-propagated through the LM into theta in a single pass.
    Returns ``(grads, meta_loss)``.
    """
    if cache is None:
        _, cache = lm.forward_with_cache(model, edit_batch, token_policy)
    theta = h.tensors(requires_grad=True)
    overrides = {}
    for layer in cache.layers:
        keys = cache.keys[layer]
        grads = cache.value_grads[layer]
        if aggregation == "normal_eq":
            diffs, _, _ = h.value_diff_graph(layer, keys, grads, theta)
            lam = ad.exp(theta[f"layer.{layer}.log_lambda"])
            gram = ad.Tensor(keys.T @ keys)
            system = gram + lam * ad.Tensor(np.eye(keys.shape[1]), charge=False)
            shift = ad.solve_right(diffs.T @ ad.Tensor(keys, charge=False), system)
        elif aggregation == "sum":
            pk, pg = h.factor_graph(layer, keys, grads, theta)
            shift = (pg.T @ pk) * (-theta[f"layer.{layer}.eta"])
        else:
            raise ValueError(f"unknown aggregation method {aggregation!r}")
        overrides[layer] = ad.Tensor(model.layer(layer).weight, charge=False) + shift
    params = lm._tensors(model, overrides=overrides)
    gen, loc = lm.meta_losses(model, model, equiv_batch, unrel_batch, loc_coeff, params,
                              len(equiv_batch), len(unrel_batch))
    total = gen + loc * loc_coeff
    total.backward()
    out = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in theta.items()}
    return out, total.item()


def meta_loss_value(h, model, edit_batch, equiv_batch, unrel_batch, *, token_policy="answer",
                    aggregation="normal_eq", loc_coeff=1.0, cache=None):
    """Forward-only meta loss of the edited model (for finite-difference checks)."""
    if cache is None:
        _, cache = lm.forward_with_cache(model, edit_batch, token_policy)
    shifts = streaming_shifts(h, cache, aggregation)
    post = lm.apply_shifts(model, {l: s for l, (s, _) in shifts.items()})
    with ad.no_grad():
        params = lm._tensors(post)
        gen, loc = lm.meta_losses(model, post, equiv_batch, unrel_batch, loc_coeff, params,
                                  len(equiv_batch), len(unrel_batch))
    return gen.item() + loc_coeff * loc.item()
