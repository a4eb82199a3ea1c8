"""A small editable sequence model with hookable linear layers.

Architecture: token + position embedding, then ``K`` blocks of
``[causal token mixing] -> fc1 -> activation -> fc2 (+ residual)``, then a
linear output head. The token mixer averages every position with the
running mean of its prefix; it has no parameters and stands in for
attention, so value gradients reach non-answer positions through it.

Layer ids are ``blocks.{k}.fc1``, ``blocks.{k}.fc2`` and ``head``. Weight
matrices are stored ``(d_out, d_in)`` so a layer computes ``v = W u + b``.
"""
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import io
from .errors import ShapeError
from .optim import Adam

TOKEN_POLICIES = ("answer", "all")
LAYER_POLICIES = ("second-fc-last-k", "first-fc-last-k")


def _frozen(a, dtype=None):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class LinearLayer:
    id: str
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"layer {self.id}: weight {self.weight.shape} / bias {self.bias.shape}")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ValueError(f"layer {self.id} has non-finite parameters")

    @property
    def d_in(self):
        return self.weight.shape[1]

    @property
    def d_out(self):
        return self.weight.shape[0]


@dataclass(frozen=True)
class EditableModel:
    embedding: np.ndarray
    positional: np.ndarray
    layers: tuple
    editable_set: tuple
    nonlinearity: str = "gelu"
    residual: bool = True
    mix: bool = True

    def __post_init__(self):
        ids = [l.id for l in self.layers]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate layer ids")
        if not self.editable_set:
            raise ValueError("editable_set must be nonempty")
        missing = set(self.editable_set) - set(ids)
        if missing:
            raise ValueError(f"editable layers {sorted(missing)} are not in the model")
        if (len(self.layers) - 1) % 2 or ids[-1] != "head":
            raise ValueError("layers must be fc1/fc2 pairs followed by a head")
        width = self.embedding.shape[1]
        if self.positional.shape[1] != width:
            raise ShapeError("positional table width differs from embedding width")
        for layer in self.layers:
            if layer.d_in != width:
                raise ShapeError(f"layer {layer.id} expects {layer.d_in} inputs, chain gives {width}")
            width = layer.d_out
        if width != self.embedding.shape[0]:
            raise ShapeError("head output size must equal the vocabulary size")
        ad.activation(self.nonlinearity)

    @property
    def vocab_size(self):
        return self.embedding.shape[0]

    @property
    def width(self):
        return self.embedding.shape[1]

    @property
    def max_len(self):
        return self.positional.shape[0]

    @property
    def n_blocks(self):
        return (len(self.layers) - 1) // 2

    @property
    def dtype(self):
        return self.embedding.dtype

    def layer(self, layer_id):
        for layer in self.layers:
            if layer.id == layer_id:
                return layer
        raise KeyError(layer_id)

    def layer_ids(self):
        return tuple(l.id for l in self.layers)

    def with_editable(self, layer_ids):
        return replace(self, editable_set=tuple(layer_ids))

    def parameters(self):
        params = {"embedding": self.embedding, "positional": self.positional}
        for layer in self.layers:
            params[f"{layer.id}.weight"] = layer.weight
            params[f"{layer.id}.bias"] = layer.bias
        return params

    def with_parameters(self, params):
        layers = tuple(
            LinearLayer(l.id, _frozen(params[f"{l.id}.weight"]), _frozen(params[f"{l.id}.bias"]))
            for l in self.layers
        )
        return replace(
            self,
            embedding=_frozen(params["embedding"]),
            positional=_frozen(params["positional"]),
            layers=layers,
        )

    def predict(self, batch):
        """Teacher-forced argmax token at every answer position, per example."""
        with ad.no_grad():
            logp, _, row_example = _answer_log_softmax(self, batch, self._constants())
        best = logp.data.argmax(axis=1)
        return [best[row_example == i] for i in range(len(batch))]

    def _constants(self):
        return {k: ad.Tensor(v, charge=False) for k, v in self.parameters().items()}

    # ---------------------------------------------------------------- io
    def save(self, path, extra_meta=None):
        meta = {
            "kind": "editable_model",
            "version": 1,
            "vocab_size": int(self.vocab_size),
            "width": int(self.width),
            "max_len": int(self.max_len),
            "layers": [[l.id, int(l.d_out), int(l.d_in)] for l in self.layers],
            "editable_set": list(self.editable_set),
            "nonlinearity": self.nonlinearity,
            "residual": bool(self.residual),
            "mix": bool(self.mix),
        }
        if extra_meta:
            meta.update(extra_meta)
        io.save_arrays(path, meta, self.parameters())

    @classmethod
    def load(cls, path):
        meta, arrays = io.load_arrays(path)
        if meta.get("kind") != "editable_model":
            raise ValueError(f"{path} does not hold an editable model")
        layers = tuple(
            LinearLayer(lid, _frozen(arrays[f"{lid}.weight"]), _frozen(arrays[f"{lid}.bias"]))
            for lid, _, _ in meta["layers"]
        )
        return cls(
            embedding=_frozen(arrays["embedding"]),
            positional=_frozen(arrays["positional"]),
            layers=layers,
            editable_set=tuple(meta["editable_set"]),
            nonlinearity=meta["nonlinearity"],
            residual=meta["residual"],
            mix=meta["mix"],
        )


def select_editable(n_blocks, policy="second-fc-last-k", last_k=6):
    """Layer ids for the "last k blocks" editing convention."""
    if policy not in LAYER_POLICIES:
        raise ValueError(f"unknown editable layer policy {policy!r}")
    fc = "fc2" if policy == "second-fc-last-k" else "fc1"
    k = min(last_k, n_blocks)
    return tuple(f"blocks.{b}.{fc}" for b in range(n_blocks - k, n_blocks))


def init_model(vocab_size, width=32, hidden=128, n_blocks=3, max_len=16, *,
               nonlinearity="gelu", residual=True, mix=True, seed=0,
               editable_policy="second-fc-last-k", last_k=6, dtype=np.float64):
    rng = np.random.default_rng(seed)

    def dense(d_out, d_in, scale=1.0):
        return rng.normal(0.0, scale / np.sqrt(d_in), size=(d_out, d_in))

    layers = []
    for b in range(n_blocks):
        layers.append(LinearLayer(f"blocks.{b}.fc1", _frozen(dense(hidden, width), dtype),
                                  _frozen(np.zeros(hidden), dtype)))
        layers.append(LinearLayer(f"blocks.{b}.fc2", _frozen(dense(width, hidden, 0.5), dtype),
                                  _frozen(np.zeros(width), dtype)))
    layers.append(LinearLayer("head", _frozen(dense(vocab_size, width), dtype),
                              _frozen(np.zeros(vocab_size), dtype)))
    return EditableModel(
        embedding=_frozen(rng.normal(0.0, 1.0, size=(vocab_size, width)), dtype),
        positional=_frozen(rng.normal(0.0, 0.1, size=(max_len, width)), dtype),
        layers=tuple(layers),
        editable_set=select_editable(n_blocks, editable_policy, last_k),
        nonlinearity=nonlinearity,
        residual=residual,
        mix=mix,
    )


# -------------------------------------------------------------------- batches

@dataclass(frozen=True)
class Batch:
    """Prompt/answer pairs fed with teacher forcing.

    The model input for example ``i`` is ``prompts[i] + answers[i][:-1]``;
    ``answer_positions[i][t]`` is the input position whose output should be
    ``answers[i][t]``.
    """
    prompts: tuple
    answers: tuple
    answer_positions: tuple = field(default=None)

    def __post_init__(self):
        prompts = tuple(tuple(int(t) for t in p) for p in self.prompts)
        answers = tuple(tuple(int(t) for t in a) for a in self.answers)
        if len(prompts) != len(answers):
            raise ValueError("prompts and answers differ in length")
        if self.answer_positions is None:
            positions = tuple(tuple(range(len(p) - 1, len(p) - 1 + len(a)))
                              for p, a in zip(prompts, answers))
        else:
            positions = tuple(tuple(int(t) for t in pos) for pos in self.answer_positions)
        for p, a, pos in zip(prompts, answers, positions):
            if not p or not a:
                raise ValueError("prompts and answers must be nonempty")
            seq_len = len(p) + len(a) - 1
            if len(pos) != len(a) or any(t < 0 or t >= seq_len for t in pos):
                raise ValueError(f"answer positions {pos} out of bounds for length {seq_len}")
        object.__setattr__(self, "prompts", prompts)
        object.__setattr__(self, "answers", answers)
        object.__setattr__(self, "answer_positions", positions)

    @classmethod
    def from_tuples(cls, tuples):
        tuples = list(tuples)
        return cls(tuple(t.prompt for t in tuples), tuple(t.answer for t in tuples))

    def __len__(self):
        return len(self.prompts)

    def sequences(self):
        return [p + a[:-1] for p, a in zip(self.prompts, self.answers)]

    def select(self, indices):
        return Batch(tuple(self.prompts[i] for i in indices),
                     tuple(self.answers[i] for i in indices),
                     tuple(self.answer_positions[i] for i in indices))

    def chunks(self, size):
        size = len(self) if not size else size
        for start in range(0, len(self), size):
            yield self.select(range(start, min(start + size, len(self))))

    def n_answer_tokens(self):
        return sum(len(a) for a in self.answers)


def _pad(batch, model):
    seqs = batch.sequences()
    T = max(len(s) for s in seqs)
    if T > model.max_len:
        raise ShapeError(f"sequence length {T} exceeds model max_len {model.max_len}")
    tokens = np.zeros((len(seqs), T), dtype=np.int64)
    lengths = np.array([len(s) for s in seqs])
    for i, s in enumerate(seqs):
        tokens[i, :len(s)] = s
    if tokens.max() >= model.vocab_size or tokens.min() < 0:
        raise ShapeError("token id outside the vocabulary")
    return tokens, lengths, T


def _answer_rows(batch, T):
    rows, targets, example = [], [], []
    for i, (ans, pos) in enumerate(zip(batch.answers, batch.answer_positions)):
        for tok, p in zip(ans, pos):
            rows.append(i * T + p)
            targets.append(tok)
            example.append(i)
    return np.array(rows), np.array(targets), np.array(example)


def _token_rows(batch, T, policy):
    if policy == "answer":
        return _answer_rows(batch, T)[0]
    if policy == "all":
        return np.array([i * T + t for i, s in enumerate(batch.sequences()) for t in range(len(s))])
    raise ValueError(f"unknown token policy {policy!r}")


def _trunk(model, tokens, params, capture=None):
    """Run embedding and blocks; return the flattened final hidden states.

    ``capture`` maps layer ids to a dict that receives ``key`` and ``value``
    tensors (both flattened over batch and time).
    """
    B, T = tokens.shape
    act = ad.activation(model.nonlinearity)
    h = ad.getitem(params["embedding"], tokens) + params["positional"][:T]
    flat = None
    for b in range(model.n_blocks):
        if model.mix:
            h = ad.causal_mix(h)
        flat = h.reshape(B * T, model.width)
        ids = (f"blocks.{b}.fc1", f"blocks.{b}.fc2")
        u1 = flat
        v1 = u1 @ params[f"{ids[0]}.weight"].T + params[f"{ids[0]}.bias"]
        u2 = act(v1)
        v2 = u2 @ params[f"{ids[1]}.weight"].T + params[f"{ids[1]}.bias"]
        if capture is not None:
            for lid, u, v in ((ids[0], u1, v1), (ids[1], u2, v2)):
                if lid in capture:
                    capture[lid]["key"] = u
                    capture[lid]["value"] = v.retain_grad()
        flat = flat + v2 if model.residual else v2
        h = flat.reshape(B, T, model.width)
    if flat is None:
        flat = h.reshape(B * T, model.width)
    return flat


def _answer_log_softmax(model, batch, params, capture=None):
    tokens, _, T = _pad(batch, model)
    rows, targets, example = _answer_rows(batch, T)
    flat = _trunk(model, tokens, params, capture)
    logits = flat[rows] @ params["head.weight"].T + params["head.bias"]
    return ad.log_softmax(logits), targets, example


def _tensors(model, grad=(), overrides=None):
    """Wrap parameters as tensors; names in ``grad`` require gradients."""
    out = {}
    for name, arr in model.parameters().items():
        out[name] = ad.Tensor(arr, requires_grad=(grad == "all" or name in grad), charge=False)
    if overrides:
        for lid, t in overrides.items():
            out[f"{lid}.weight"] = t
    return out


def sequence_log_probs(model, batch):
    """``log p(y_i | x_i)`` summed over answer tokens, one value per example."""
    with ad.no_grad():
        logp, targets, example = _answer_log_softmax(model, batch, model._constants())
    tok = logp.data[np.arange(len(targets)), targets]
    return np.bincount(example, weights=tok, minlength=len(batch))


def nll(model, batch):
    return float(-sequence_log_probs(model, batch).sum())


# ------------------------------------------------------------------ hook cache

@dataclass
class HookCache:
    """Per-layer keys and value gradients, rows aligned with ``tokens``.

    ``keys[l]`` is ``(n, d_l)`` and ``value_grads[l]`` is ``(n, d'_l)``;
    ``tokens[j] = (example, position)`` names the token behind row ``j``.
    """
    keys: dict
    value_grads: dict
    tokens: np.ndarray
    token_policy: str
    weight_grads: dict = None

    @property
    def n(self):
        return len(self.tokens)

    @property
    def layers(self):
        return tuple(self.keys)

    def __getitem__(self, item):
        layer, j = item
        return self.keys[layer][j], self.value_grads[layer][j]

    def blocks(self, layer, size):
        """Yield ``(start, keys, value_grads)`` row blocks for one layer."""
        size = self.n if not size else size
        for start in range(0, self.n, size):
            yield start, self.keys[layer][start:start + size], self.value_grads[layer][start:start + size]

    def select(self, rows):
        rows = np.asarray(rows)
        return HookCache(
            {l: k[rows] for l, k in self.keys.items()},
            {l: g[rows] for l, g in self.value_grads.items()},
            self.tokens[rows],
            self.token_policy,
        )

    def nbytes(self):
        return sum(a.nbytes for a in self.keys.values()) + sum(a.nbytes for a in self.value_grads.values())


def forward_with_cache(model, batch, policy="answer", *, sub_batch_size=None, weight_grads=False):
    """Back-propagate the summed answer NLL and cache keys / value gradients.

    Returns ``(loss, cache)``. With ``weight_grads=True`` the cache also
    carries the full gradient of the loss with respect to every editable
    weight matrix (summed over all positions).
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    if policy not in TOKEN_POLICIES:
        raise ValueError(f"unknown token policy {policy!r}")
    layers = model.editable_set
    keys = {l: [] for l in layers}
    grads = {l: [] for l in layers}
    wgrads = {l: np.zeros_like(model.layer(l).weight) for l in layers} if weight_grads else None
    tokens = []
    total = 0.0
    offset = 0
    for chunk in batch.chunks(sub_batch_size):
        # editable weights require grad so every value on a path to the loss does
        params = _tensors(model, grad=tuple(f"{l}.weight" for l in layers))
        capture = {l: {} for l in layers}
        logp, targets, _ = _answer_log_softmax(model, chunk, params, capture)
        loss = -ad.pick(logp, targets).sum()
        loss.backward()
        total += loss.item()
        T = max(len(s) for s in chunk.sequences())
        rows = _token_rows(chunk, T, policy)
        for l in layers:
            keys[l].append(np.array(capture[l]["key"].data[rows]))
            grads[l].append(np.array(capture[l]["value"].grad[rows]))
            if weight_grads:
                wgrads[l] += params[f"{l}.weight"].grad
        tokens.extend((offset + r // T, r % T) for r in rows)
        offset += len(chunk)
    cache = HookCache(
        {l: np.concatenate(keys[l]) for l in layers},
        {l: np.concatenate(grads[l]) for l in layers},
        np.array(tokens, dtype=np.int64).reshape(-1, 2),
        policy,
        wgrads,
    )
    return total, cache


# --------------------------------------------------------------------- editing

def apply_shifts(model, shifts):
    """Return a copy of ``model`` with ``W_l + S_l`` on the given layers."""
    shifts = dict(shifts)
    unknown = set(shifts) - set(model.editable_set)
    if unknown:
        raise ValueError(f"shifts given for non-editable layers {sorted(unknown)}")
    layers = []
    for layer in model.layers:
        if layer.id in shifts:
            s = np.asarray(shifts[layer.id])
            if s.shape != layer.weight.shape:
                raise ShapeError(f"shift {s.shape} does not match layer {layer.id} {layer.weight.shape}")
            layer = LinearLayer(layer.id, _frozen(layer.weight + s), layer.bias)
        layers.append(layer)
    return replace(model, layers=tuple(layers))


def kl_rows(ref_logp, logq):
    """``KL(p_ref || q)`` per row; ``ref_logp`` is a constant array."""
    p = np.exp(ref_logp)
    return (ad.Tensor(p, charge=False) * (ad.Tensor(ref_logp, charge=False) - logq)).sum(axis=1)


def meta_losses(pre_model, post_model, equiv, unrel, loc_coeff, params, n_equiv, n_unrel):
    """Graph for one equivalent/unrelated chunk pair, scaled for accumulation.

    ``params`` are the post-edit parameter tensors; the returned tensors are
    this chunk's share of the mean generalization and locality losses.
    """
    gen = loc = None
    if equiv is not None and len(equiv):
        logp, targets, _ = _answer_log_softmax(post_model, equiv, params)
        gen = -ad.pick(logp, targets).sum() * (1.0 / n_equiv)
    if unrel is not None and len(unrel):
        with ad.no_grad():
            ref, _, _ = _answer_log_softmax(pre_model, unrel, pre_model._constants())
        logq, _, _ = _answer_log_softmax(post_model, unrel, params)
        loc = kl_rows(ref.data, logq).sum() * (1.0 / n_unrel)
    return gen, loc


def meta_backward_on_weights(pre_model, post_model, equiv, unrel, loc_coeff, *, sub_batch_size=None):
    """Meta loss ``L_gen + loc_coeff * L_loc`` and its gradient on edited weights.

    ``L_gen`` is the mean NLL over ``equiv``; ``L_loc`` the mean
    ``KL(p_pre || p_post)`` over ``unrel`` (summed over answer positions).
    Chunks of ``sub_batch_size`` examples are back-propagated one at a time
    and their weight gradients accumulated.

    Returns ``(loss, grads, parts)`` with ``parts = {"gen": ..., "loc": ...}``.
    """
    if loc_coeff < 0:
        raise ValueError("locality coefficient must be non-negative")
    if len(equiv) == 0 or len(unrel) == 0:
        raise ValueError("equivalent and unrelated batches must be nonempty")
    if pre_model.layer_ids() != post_model.layer_ids():
        raise ShapeError("pre- and post-edit models differ in architecture")
    layers = post_model.editable_set
    weights = {l: ad.Tensor(post_model.layer(l).weight, requires_grad=True, charge=False) for l in layers}
    gen_total = loc_total = 0.0
    eq_chunks = list(equiv.chunks(sub_batch_size))
    un_chunks = list(unrel.chunks(sub_batch_size))
    for k in range(max(len(eq_chunks), len(un_chunks))):
        params = _tensors(post_model, overrides=weights)
        gen, loc = meta_losses(
            pre_model, post_model,
            eq_chunks[k] if k < len(eq_chunks) else None,
            un_chunks[k] if k < len(un_chunks) else None,
            loc_coeff, params, len(equiv), len(unrel),
        )
        total = None
        if gen is not None:
            gen_total += gen.item()
            total = gen
        if loc is not None:
            loc_total += loc.item()
            total = loc * loc_coeff if total is None else total + loc * loc_coeff
        if total.requires_grad:
            total.backward()
    grads = {l: (w.grad if w.grad is not None else np.zeros_like(w.data)) for l, w in weights.items()}
    return gen_total + loc_coeff * loc_total, grads, {"gen": gen_total, "loc": loc_total}


# ------------------------------------------------------------ base-model fit

def fit_base_model(model, batch, *, epochs=100, lr=1e-2, batch_size=64, seed=0, weight_decay=0.0):
    """Train every parameter on ``batch`` by minibatch Adam; returns a new model."""
    rng = np.random.default_rng(seed)
    opt = Adam(lr, weight_decay=weight_decay)
    params = {k: np.array(v, dtype=np.float64) for k, v in model.parameters().items()}
    current = model
    for _ in range(epochs):
        order = rng.permutation(len(batch))
        for start in range(0, len(batch), batch_size):
            chunk = batch.select(order[start:start + batch_size])
            tensors = _tensors(current, grad="all")
            logp, targets, _ = _answer_log_softmax(current, chunk, tensors)
            loss = -ad.pick(logp, targets).sum() * (1.0 / len(chunk))
            loss.backward()
            grads = {k: t.grad for k, t in tensors.items() if t.grad is not None}
            params = opt.step(params, grads)
            current = current.with_parameters(params)
    return current
