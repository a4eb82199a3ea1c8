"""Gradient-conditioned hyper-network producing rank-1 shift factors.

For a cached tuple ``(u, g)`` (layer input and gradient of the edit loss
with respect to the layer output) the network returns a pseudo key ``pk``
and pseudo gradient ``pg``; the implied weight shift is
``S = -eta * outer(pg, pk)``. Shifts are never materialized: the value
change ``S u = -eta * (pk . u) * pg`` is formed scalar first.

Per distinct layer shape ``(d, d')`` one stack of low-rank residual blocks
is shared; each layer owns an elementwise output scale/shift, a step size
``eta`` and a log-regularizer ``log_lambda``. Inputs are standardized with
running statistics that are updated explicitly (:meth:`update_normalizer`)
and are constants for differentiation.
"""
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import io, kernels
from .errors import ShapeError


def shape_key(d, dp):
    return f"{d}x{dp}"


@dataclass
class RunningNorm:
    count: float
    mean: np.ndarray
    m2: np.ndarray
    eps: float = 1e-8

    @classmethod
    def empty(cls, size):
        return cls(0.0, np.zeros(size), np.zeros(size))

    def update(self, x):
        x = np.asarray(x, dtype=np.float64)
        if len(x) == 0:
            return
        n_b = float(len(x))
        mean_b = x.mean(axis=0)
        m2_b = ((x - mean_b) ** 2).sum(axis=0)
        total = self.count + n_b
        delta = mean_b - self.mean
        self.mean = self.mean + delta * (n_b / total)
        self.m2 = self.m2 + m2_b + delta ** 2 * (self.count * n_b / total)
        self.count = total

    def stats(self):
        if self.count < 2:
            return np.zeros_like(self.mean), np.ones_like(self.mean)
        return self.mean, np.sqrt(self.m2 / self.count + self.eps)

    def __call__(self, x):
        mean, std = self.stats()
        return (x - mean) / std


@dataclass
class ShiftFactors:
    """Per-layer pseudo keys ``(n, d)``, pseudo gradients ``(n, d')`` and step ``eta``."""
    pseudo_keys: dict
    pseudo_grads: dict
    eta: dict

    def shift(self, layer, j):
        """Materialize the rank-1 shift of token ``j`` (for checks only)."""
        return -self.eta[layer] * np.outer(self.pseudo_grads[layer][j], self.pseudo_keys[layer][j])


class HyperNetwork:
    def __init__(self, params, normalizers, layer_shapes, rank, blocks, activation="relu"):
        self.params = params
        self.normalizers = normalizers
        self.layer_shapes = dict(layer_shapes)
        self.rank = rank
        self.blocks = blocks
        self.activation = activation
        ad.activation(activation)

    # --------------------------------------------------------------- access
    @property
    def layers(self):
        return tuple(self.layer_shapes)

    def eta(self, layer):
        return float(self.params[f"layer.{layer}.eta"])

    def lam(self, layer):
        return float(np.exp(self.params[f"layer.{layer}.log_lambda"]))

    def copy(self):
        return HyperNetwork(
            {k: np.array(v) for k, v in self.params.items()},
            {k: RunningNorm(n.count, n.mean.copy(), n.m2.copy(), n.eps) for k, n in self.normalizers.items()},
            self.layer_shapes, self.rank, self.blocks, self.activation,
        )

    def with_params(self, params):
        return HyperNetwork(dict(params), self.normalizers, self.layer_shapes, self.rank, self.blocks,
                            self.activation)

    def param_names(self, layer):
        d, dp = self.layer_shapes[layer]
        net = f"net.{shape_key(d, dp)}"
        names = [f"{net}.{b}.{p}" for b in range(self.blocks) for p in ("down", "down_bias", "up", "up_bias")]
        names += [f"layer.{layer}.{p}" for p in ("scale", "shift", "eta", "log_lambda")]
        return names

    def zeros_like_params(self):
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def update_normalizer(self, cache):
        for layer in self.layers:
            d, dp = self.layer_shapes[layer]
            x = np.concatenate([cache.keys[layer], cache.value_grads[layer]], axis=1)
            self.normalizers[shape_key(d, dp)].update(x)

    # -------------------------------------------------------------- forward
    def _check(self, layer, keys, grads):
        if layer not in self.layer_shapes:
            raise ShapeError(f"hyper-network has no head for layer {layer}")
        d, dp = self.layer_shapes[layer]
        if keys.ndim != 2 or grads.ndim != 2 or keys.shape[1] != d or grads.shape[1] != dp \
                or len(keys) != len(grads):
            raise ShapeError(f"layer {layer} expects ({d}, {dp}) tuples, got {keys.shape}, {grads.shape}")

    def factor_graph(self, layer, keys, grads, params):
        """Pseudo key / gradient tensors for a block of tuples.

        ``params`` maps parameter names to tensors (only this layer's names
        are read), so the same code serves inference and training.
        """
        self._check(layer, keys, grads)
        d, dp = self.layer_shapes[layer]
        key = shape_key(d, dp)
        act = ad.activation(self.activation)
        x = ad.Tensor(self.normalizers[key](np.concatenate([keys, grads], axis=1)))
        for b in range(self.blocks):
            p = f"net.{key}.{b}"
            hidden = act(x @ params[f"{p}.down"] + params[f"{p}.down_bias"])
            x = x + (hidden @ params[f"{p}.up"] + params[f"{p}.up_bias"])
        x = x * params[f"layer.{layer}.scale"] + params[f"layer.{layer}.shift"]
        return x[:, :d], x[:, d:]

    def value_diff_graph(self, layer, keys, grads, params):
        """``d_j = -eta * (pk_j . u_j) * pg_j`` as a differentiable tensor."""
        pk, pg = self.factor_graph(layer, keys, grads, params)
        coef = (pk * keys).sum(axis=1) * (-params[f"layer.{layer}.eta"])
        return coef.reshape(-1, 1) * pg, pk, pg

    def tensors(self, names=None, requires_grad=False):
        names = self.params if names is None else names
        return {k: ad.Tensor(self.params[k], requires_grad=requires_grad, charge=False) for k in names}

    # ------------------------------------------------------------------ io
    def save(self, path, optimizer=None, extra_meta=None):
        meta = {
            "kind": "hyper_network",
            "version": 1,
            "rank": self.rank,
            "blocks": self.blocks,
            "activation": self.activation,
            "layer_shapes": {k: list(v) for k, v in self.layer_shapes.items()},
            "normalizer_counts": {k: n.count for k, n in self.normalizers.items()},
        }
        if extra_meta:
            meta.update(extra_meta)
        arrays = {f"theta/{k}": v for k, v in self.params.items()}
        for k, n in self.normalizers.items():
            arrays[f"norm/{k}/mean"] = n.mean
            arrays[f"norm/{k}/m2"] = n.m2
        if optimizer is not None:
            arrays.update({f"opt/{k}": v for k, v in optimizer.state_arrays().items()})
        io.save_arrays(path, meta, arrays)

    @classmethod
    def load(cls, path, optimizer=None):
        meta, arrays = io.load_arrays(path)
        if meta.get("kind") != "hyper_network":
            raise ValueError(f"{path} does not hold a hyper-network")
        params = {k[6:]: v for k, v in arrays.items() if k.startswith("theta/")}
        norms = {
            k: RunningNorm(c, arrays[f"norm/{k}/mean"], arrays[f"norm/{k}/m2"])
            for k, c in meta["normalizer_counts"].items()
        }
        h = cls(params, norms, {k: tuple(v) for k, v in meta["layer_shapes"].items()},
                meta["rank"], meta["blocks"], meta["activation"])
        if optimizer is not None:
            optimizer.load_state_arrays({k[4:]: v for k, v in arrays.items() if k.startswith("opt/")})
        return h


def layer_shapes_of(model):
    return {l: (model.layer(l).d_in, model.layer(l).d_out) for l in model.editable_set}


def init_hypernetwork(layer_shapes, *, rank=32, blocks=2, eta_init=1e-6, lambda_init=None,
                      seed=0, activation="relu"):
    """Identity-initialized editor: up-projections start at zero.

    ``lambda_init`` defaults to ``1e-3 * d`` for a layer with key size ``d``.
    """
    rng = np.random.default_rng(seed)
    params = {}
    norms = {}
    for d, dp in sorted(set(layer_shapes.values())):
        key = shape_key(d, dp)
        size = d + dp
        norms[key] = RunningNorm.empty(size)
        for b in range(blocks):
            params[f"net.{key}.{b}.down"] = rng.normal(0.0, 1.0 / np.sqrt(size), size=(size, rank))
            params[f"net.{key}.{b}.down_bias"] = np.zeros(rank)
            params[f"net.{key}.{b}.up"] = np.zeros((rank, size))
            params[f"net.{key}.{b}.up_bias"] = np.zeros(size)
    for layer, (d, dp) in layer_shapes.items():
        lam = 1e-3 * d if lambda_init is None else lambda_init
        if lam <= 0:
            raise ValueError("lambda_init must be positive")
        params[f"layer.{layer}.scale"] = np.ones(d + dp)
        params[f"layer.{layer}.shift"] = np.zeros(d + dp)
        params[f"layer.{layer}.eta"] = np.array(float(eta_init))
        params[f"layer.{layer}.log_lambda"] = np.array(np.log(lam))
    return HyperNetwork(params, norms, layer_shapes, rank, blocks, activation)


def generate_factors(h, cache, *, sub_batch_size=None):
    """Pseudo keys and gradients for every cached tuple (no graph is kept)."""
    if cache.n == 0:
        raise ValueError("empty cache")
    pkeys, pgrads, etas = {}, {}, {}
    with ad.no_grad():
        for layer in cache.layers:
            params = h.tensors(h.param_names(layer))
            ks, gs = [], []
            for _, keys, grads in cache.blocks(layer, sub_batch_size):
                pk, pg = h.factor_graph(layer, keys, grads, params)
                ks.append(pk.data)
                gs.append(pg.data)
            pkeys[layer] = np.concatenate(ks)
            pgrads[layer] = np.concatenate(gs)
            etas[layer] = h.eta(layer)
    return ShiftFactors(pkeys, pgrads, etas)


def value_difference(factors, cache):
    """``d_{l,j} = -eta_l (pk_{l,j} . u_{l,j}) pg_{l,j}`` for every layer; rows follow the cache."""
    out = {}
    for layer in cache.layers:
        if layer not in factors.pseudo_keys or len(factors.pseudo_keys[layer]) != cache.n:
            raise ValueError(f"factors and cache disagree on layer {layer}")
        out[layer], _ = kernels.value_differences(
            factors.pseudo_keys[layer], cache.keys[layer], factors.pseudo_grads[layer], factors.eta[layer]
        )
    return out


def proxy_backward(h, cache, d_grads, *, sub_batch_size=None, observer=None, layers=None):
    """Gradient in theta of ``sum_{l,j} d_grads[l][j] . d_{l,j}`` with ``d_grads`` frozen.

    ``d_grads[l]`` is either an ``(n, d')`` array or a callable
    ``(start, keys_block) -> (rows, d')`` evaluated when the block is reached.
    ``observer(layer, start, keys_block, diffs_block)`` sees each block's
    value differences. Returns a dict shaped like ``h.params``.
    """
    grads = h.zeros_like_params()
    for layer in (layers or cache.layers):
        params = h.tensors(h.param_names(layer), requires_grad=True)
        target = d_grads[layer]
        for start, keys, vgrads in cache.blocks(layer, sub_batch_size):
            g = target(start, keys) if callable(target) else target[start:start + len(keys)]
            if not np.any(g) and observer is None:
                continue
            diffs, _, _ = h.value_diff_graph(layer, keys, vgrads, params)
            if observer is not None:
                observer(layer, start, keys, diffs.data)
            proxy = (diffs * ad.Tensor(g, charge=False)).sum()
            proxy.backward()
        for name, t in params.items():
            if t.grad is not None:
                grads[name] = grads[name] + t.grad
    return grads


def shift_proxy_backward(h, cache, weight_grads, *, sub_batch_size=None, observer=None, layers=None):
    """Gradient in theta of ``sum_l <weight_grads[l], S_l>`` for summed shifts.

    ``S_l = -eta_l * sum_j outer(pg_j, pk_j)``, accumulated block by block.
    """
    grads = h.zeros_like_params()
    for layer in (layers or cache.layers):
        params = h.tensors(h.param_names(layer), requires_grad=True)
        G = ad.Tensor(np.asarray(weight_grads[layer]), charge=False)
        eta = params[f"layer.{layer}.eta"]
        for start, keys, vgrads in cache.blocks(layer, sub_batch_size):
            pk, pg = h.factor_graph(layer, keys, vgrads, params)
            if observer is not None:
                diffs, _ = kernels.value_differences(pk.data, keys, pg.data, float(eta.data))
                observer(layer, start, keys, diffs)
            # <G, -eta pg^T pk> = -eta * sum((pk @ G^T) * pg)
            proxy = ((pk @ G.T) * pg).sum() * (-eta)
            proxy.backward()
        for name, t in params.items():
            if t.grad is not None:
                grads[name] = grads[name] + t.grad
    return grads
