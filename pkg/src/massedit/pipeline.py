"""Editor configuration, inference, training and the fine-tuning baseline."""
import csv
import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import lm
from .aggregate import METHODS, AggregationResult, ResidualReport, residual_array
from .errors import NonFiniteLossError, ParseError, SingularMatrixError
from .hypernet import generate_factors, init_hypernetwork, layer_shapes_of, value_difference
from .metagrad import accumulate_editor_gradient, streaming_shifts
from .optim import Adam, clip_by_global_norm
from .tasks import sample_edit_batch


@dataclass(frozen=True)
class EditorConfig:
    rank: int = 32
    blocks: int = 2
    eta_init: float = 1e-6
    meta_lr: float = 1e-5
    locality_coeff: float = 1.0
    max_grad_norm: float = 1.0
    token_policy: str = "answer"
    editable_layer_policy: str = "second-fc-last-k"
    aggregation: str = "normal_eq"
    lambda_init: float = None  # None: 1e-3 * key size per layer
    seed: int = 0
    steps: int = 300
    m_edits: int = 32
    sub_batch_size: int = 16

    def __post_init__(self):
        for name in ("rank", "blocks", "steps", "m_edits", "sub_batch_size", "seed"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise ValueError(f"{name} must be an integer, got {value!r}")
        for name in ("eta_init", "meta_lr", "locality_coeff", "max_grad_norm"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not value > 0 or not math.isfinite(value):
                raise ValueError(f"{name} must be a positive number, got {value!r}")
        if self.lambda_init is not None and not self.lambda_init > 0:
            raise ValueError(f"lambda_init must be positive, got {self.lambda_init!r}")
        if self.rank < 1 or self.blocks < 0 or self.m_edits < 1 or self.sub_batch_size < 1:
            raise ValueError("rank, m_edits and sub_batch_size must be >= 1 and blocks >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.token_policy not in lm.TOKEN_POLICIES:
            raise ValueError(f"token_policy must be one of {lm.TOKEN_POLICIES}")
        if self.editable_layer_policy not in lm.LAYER_POLICIES:
            raise ValueError(f"editable_layer_policy must be one of {lm.LAYER_POLICIES}")
        if self.aggregation not in METHODS:
            raise ValueError(f"aggregation must be one of {METHODS}")

    @classmethod
    def from_dict(cls, obj):
        return cls(**_checked_fields(cls, obj, "editor config"))

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def hash(self):
        return config_hash(self.to_dict())


def _checked_fields(cls, obj, what):
    if not isinstance(obj, dict):
        raise ParseError(f"{what} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(obj) - names)
    if unknown:
        raise ParseError(f"unknown {what} keys: {', '.join(unknown)}")
    return dict(obj)


def config_hash(obj):
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class TaskConfig:
    """Synthetic task parameters."""
    seed: int = 0
    num_facts: int = 512
    vocab_size: int = 128
    prompt_len: int = 5
    paraphrases_per_fact: int = 2
    num_unrelated: int = 256
    answer_len: int = 1
    flip_labels: bool = True
    val_fraction: float = 0.25

    @classmethod
    def from_dict(cls, obj):
        return cls(**_checked_fields(cls, obj, "task config"))


@dataclass(frozen=True)
class ModelConfig:
    """Base language model shape and pretraining."""
    width: int = 32
    hidden: int = 128
    n_blocks: int = 3
    last_k: int = 3
    nonlinearity: str = "gelu"
    epochs: int = 60
    lr: float = 1e-2
    batch_size: int = 64
    seed: int = 0

    @classmethod
    def from_dict(cls, obj):
        return cls(**_checked_fields(cls, obj, "model config"))


@dataclass(frozen=True)
class ExperimentConfig:
    """Top-level config file: ``{"editor": ..., "task": ..., "model": ...}``."""
    editor: EditorConfig = field(default_factory=EditorConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    @classmethod
    def from_dict(cls, obj):
        obj = _checked_fields(cls, obj, "config")
        return cls(
            EditorConfig.from_dict(obj.get("editor", {})),
            TaskConfig.from_dict(obj.get("task", {})),
            ModelConfig.from_dict(obj.get("model", {})),
        )

    @classmethod
    def load(cls, path):
        with open(path) as f:
            try:
                obj = json.load(f)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: invalid JSON ({exc.msg})", line=exc.lineno) from None
        return cls.from_dict(obj)

    def to_dict(self):
        return {"editor": self.editor.to_dict(), "task": dataclasses.asdict(self.task),
                "model": dataclasses.asdict(self.model)}

    def hash(self):
        return config_hash(self.to_dict())

    def with_seed(self, seed):
        return ExperimentConfig(self.editor.replace(seed=seed), self.task, self.model)


# ------------------------------------------------------------------ set-up

def prepare_editor(model, config, *, activation="relu"):
    """Select the editable layers named by ``config`` and build a fresh editor for them."""
    model = model.with_editable(lm.select_editable(model.n_blocks, config.editable_layer_policy,
                                                   len(model.editable_set)))
    h = init_hypernetwork(layer_shapes_of(model), rank=config.rank, blocks=config.blocks,
                          eta_init=config.eta_init, lambda_init=config.lambda_init, seed=config.seed,
                          activation=activation)
    return model, h


# --------------------------------------------------------------- inference

def editor_inference(h, model, edit_batch, config):
    """Edit ``model`` with the trained editor.

    Returns ``(post_model, {layer: AggregationResult}, cache)``; the
    aggregation results keep keys and value differences in column layout.
    """
    _, cache = lm.forward_with_cache(model, edit_batch, config.token_policy,
                                     sub_batch_size=config.sub_batch_size)
    factors = generate_factors(h, cache, sub_batch_size=config.sub_batch_size)
    diffs = value_difference(factors, cache)
    shifts = streaming_shifts(h, cache, config.aggregation, config.sub_batch_size)
    results = {
        l: AggregationResult(l, cache.keys[l].T, diffs[l].T, h.lam(l), shifts[l][0], config.aggregation)
        for l in cache.layers
    }
    post = lm.apply_shifts(model, {l: r.shift for l, r in results.items()})
    return post, results, cache


def residual_report_of(results):
    """Per-token residuals for every layer of an :func:`editor_inference` run."""
    return ResidualReport({l: residual_array(r.shift, r.keys.T, r.diffs.T) for l, r in results.items()})


# ---------------------------------------------------------------- training

@dataclass
class TrainLog:
    """One diagnostics record per completed step."""
    records: list = field(default_factory=list)
    checkpoint: str = None

    BASE_COLUMNS = ("step", "meta_loss", "gen_loss", "loc_loss", "mr", "mr_excluded",
                    "grad_norm_before", "grad_norm_after", "wall_clock_s")

    def __len__(self):
        return len(self.records)

    def columns(self):
        layers = sorted(self.records[0]["shift_norm"]) if self.records else []
        return list(self.BASE_COLUMNS) + [f"shift_norm[{l}]" for l in layers] + [f"lambda[{l}]" for l in layers]

    def rows(self):
        for r in self.records:
            row = [r[c] for c in self.BASE_COLUMNS]
            layers = sorted(r["shift_norm"])
            row += [r["shift_norm"][l] for l in layers] + [r["lambda"][l] for l in layers]
            yield row

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(self.columns())
            for row in self.rows():
                w.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])


def train_editor(h, model, task, config, *, deterministic=False, callback=None, optimizer=None, start_step=0):
    """Meta-train ``h`` on edits sampled from ``task``'s train split.

    ``model`` is only read. Returns ``(h, log, optimizer)``; with
    ``deterministic`` wall-clock fields are written as 0.
    """
    if tuple(model.editable_set) != tuple(h.layers):
        raise ValueError("editor layers do not match the model's editable set")
    h = h.copy()
    opt = optimizer or Adam(config.meta_lr)
    log = TrainLog()
    for step in range(start_step, start_step + config.steps):
        t0 = time.perf_counter()
        edit, equiv, unrel = sample_edit_batch(task, config.m_edits, [config.seed, step], split="train")
        _, cache = lm.forward_with_cache(model, edit, config.token_policy, sub_batch_size=config.sub_batch_size)
        h.update_normalizer(cache)
        try:
            grads, loss, diag = accumulate_editor_gradient(
                h, model, edit, equiv, unrel, config.sub_batch_size, token_policy=config.token_policy,
                aggregation=config.aggregation, loc_coeff=config.locality_coeff, cache=cache,
            )
        except SingularMatrixError as exc:
            exc.args = (f"step {step}: {exc}",)
            raise
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise NonFiniteLossError(step, loss)
        clipped, before, after = clip_by_global_norm(grads, config.max_grad_norm)
        h = h.with_params(opt.step(h.params, clipped))
        record = {
            "step": step, "meta_loss": loss, "gen_loss": diag["gen_loss"], "loc_loss": diag["loc_loss"],
            "mr": diag["mr"], "mr_excluded": diag["mr_excluded"],
            "grad_norm_before": before, "grad_norm_after": after,
            "wall_clock_s": 0.0 if deterministic else time.perf_counter() - t0,
            "shift_norm": diag["shift_norm"], "lambda": diag["lambda"],
        }
        log.records.append(record)
        if callback is not None:
            callback(step, h, record)
    return h, log, opt


# ------------------------------------------------------- fine-tuning baseline

def finetune_edit_baseline(model, edit_batch, epochs=5, lr=5e-4, weight_decay=5e-4, *, batch_size=None):
    """Tune the editable layers on the edit batch with decoupled weight decay.

    One epoch is one pass over ``edit_batch`` in chunks of ``batch_size``
    (default: the whole batch) minimizing the mean sequence NLL.
    """
    names = [f"{l}.{p}" for l in model.editable_set for p in ("weight", "bias")]
    opt = Adam(lr, weight_decay=weight_decay)
    params = {k: np.array(v, dtype=np.float64) for k, v in model.parameters().items()}
    current = model
    for epoch in range(epochs):
        for chunk in edit_batch.chunks(batch_size):
            tensors = lm._tensors(current, grad=tuple(names))
            logp, targets, _ = lm._answer_log_softmax(current, chunk, tensors)
            loss = -ad.pick(logp, targets).sum() * (1.0 / len(chunk))
            if not math.isfinite(loss.item()):
                raise NonFiniteLossError(epoch, loss.item())
            loss.backward()
            grads = {k: tensors[k].grad for k in names}
            params = opt.step(params, grads)
            current = current.with_parameters(params)
    return current
