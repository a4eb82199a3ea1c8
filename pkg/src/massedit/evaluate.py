"""Edit metrics, scaling curves and ablations."""
import csv
import math
import os
import statistics
import time
import warnings
from dataclasses import dataclass, field, fields

import numpy as np

from . import lm, memory
from .errors import NonFiniteLossError, SingularMatrixError
from .metagrad import accumulate_editor_gradient
from .pipeline import editor_inference, finetune_edit_baseline, prepare_editor, residual_report_of, train_editor
from .tasks import eval_split, sample_edit_batch

RESULT_COLUMNS = ("method", "m", "seed", "es", "gs", "ls", "mr", "wall_clock_s", "peak_mem_bytes")
REDUCTIONS = ("sequence", "token", "token-per-example")
METHODS = ("malmen", "sum", "finetune")


@dataclass(frozen=True)
class EditMetrics:
    method: str
    m: int
    seed: int
    es: float
    gs: float
    ls: float
    mr: float = float("nan")
    wall_clock_s: float = 0.0
    peak_mem_bytes: int = 0
    outcome: str = "ok"

    def __post_init__(self):
        for name in ("es", "gs", "ls"):
            v = getattr(self, name)
            if not (math.isnan(v) or 0.0 <= v <= 1.0):
                raise ValueError(f"{name}={v} outside [0, 1]")

    def row(self):
        return [getattr(self, c) for c in RESULT_COLUMNS]


def _score(model, batch, reduction):
    pred = model.predict(batch)
    hits = [np.asarray(p) == np.asarray(a) for p, a in zip(pred, batch.answers)]
    if reduction == "sequence":
        return float(np.mean([h.all() for h in hits]))
    if reduction == "token":
        return float(np.concatenate(hits).mean())
    if reduction == "token-per-example":
        return float(np.mean([h.mean() for h in hits]))
    raise ValueError(f"unknown reduction {reduction!r}; choose from {REDUCTIONS}")


def compute_metrics(pre_model, post_model, split, *, reduction="sequence", method="", m=None, seed=0,
                    mr=float("nan"), wall_clock_s=0.0, peak_mem_bytes=0):
    """ES / GS / LS as argmax-match fractions on the edit, equivalent and unrelated tuples.

    ``reduction="sequence"`` counts an example only when every answer token
    matches; ``"token"`` averages over all answer tokens and
    ``"token-per-example"`` averages per-example token accuracy.
    ``pre_model`` is accepted for symmetry and is not consulted: LS is
    scored against the unrelated tuples' own answers.
    """
    del pre_model
    for name in ("edits", "equivalents", "unrelated"):
        if len(getattr(split, name)) == 0:
            raise ValueError(f"empty {name} in the evaluation split")
    return EditMetrics(
        method=method, m=len(split.edits) if m is None else m, seed=seed,
        es=_score(post_model, split.edits, reduction),
        gs=_score(post_model, split.equivalents, reduction),
        ls=_score(post_model, split.unrelated, reduction),
        mr=mr, wall_clock_s=wall_clock_s, peak_mem_bytes=peak_mem_bytes,
    )


class LookupModel:
    """Answers every prompt it has stored; anything else gets token 0."""

    def __init__(self, table):
        self.table = {tuple(k): tuple(v) for k, v in table.items()}

    @classmethod
    def from_task(cls, task):
        tuples = list(task.unrelated_pool) + list(task.edits) + [t for eq in task.equivalents for t in eq]
        return cls({t.prompt: t.answer for t in tuples})

    def predict(self, batch):
        return [np.array(self.table.get(p, (0,) * len(a))) for p, a in zip(batch.prompts, batch.answers)]


# ---------------------------------------------------------------- one run

def _now(deterministic):
    return 0.0 if deterministic else time.perf_counter()


def run_method(method, editor_config, task, base, m, seed, *, deterministic=False, measure_memory=True,
               eval_seed=None):
    """Train (when needed) and apply one editing method; return its :class:`EditMetrics`.

    ``malmen`` and ``sum`` train an editor with normal-equation or summed
    aggregation; ``finetune`` tunes the editable layers on the edit batch.
    Singular systems and non-finite losses become outcome rows.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    cfg = editor_config.replace(seed=seed, m_edits=m)
    if method == "sum":
        cfg = cfg.replace(aggregation="sum")
    elif method == "malmen":
        cfg = cfg.replace(aggregation="normal_eq") if cfg.aggregation == "sum" else cfg
    _, split = eval_split(task, m, [seed, 1000 + m] if eval_seed is None else eval_seed, split="val")
    t0 = time.perf_counter()
    try:
        if method == "finetune":
            model = base
            post = finetune_edit_baseline(base, split.edits)
            mr = float("nan")
            peak = 0
        else:
            model, h = prepare_editor(base, cfg)
            h, _, _ = train_editor(h, model, task, cfg, deterministic=deterministic)
            post, results, _ = editor_inference(h, model, split.edits, cfg)
            mr = residual_report_of(results).mean_residual
            peak = 0
            if measure_memory:
                edit, equiv, unrel = sample_edit_batch(task, m, [seed, 2000 + m], split="val")
                with memory.metered() as meter:
                    accumulate_editor_gradient(h, model, edit, equiv, unrel, cfg.sub_batch_size,
                                               token_policy=cfg.token_policy, aggregation=cfg.aggregation,
                                               loc_coeff=cfg.locality_coeff)
                peak = meter.peak
    except SingularMatrixError as exc:
        return _failed(method, m, seed, f"singular: {exc}")
    except NonFiniteLossError as exc:
        return _failed(method, m, seed, f"non-finite: {exc}")
    elapsed = 0.0 if deterministic else time.perf_counter() - t0
    metrics = compute_metrics(model, post, split, method=method, m=m, seed=seed, mr=mr,
                              wall_clock_s=elapsed, peak_mem_bytes=peak)
    if not all(math.isfinite(v) for v in (metrics.es, metrics.gs, metrics.ls)):
        return _failed(method, m, seed, "non-finite metrics")
    return metrics


def _failed(method, m, seed, outcome):
    nan = float("nan")
    return EditMetrics(method, m, seed, nan, nan, nan, nan, 0.0, 0, outcome)


# ------------------------------------------------------------------ tables

@dataclass
class ResultTable:
    rows: list = field(default_factory=list)

    def sorted_rows(self):
        return sorted(self.rows, key=lambda r: (r.method, r.m, r.seed))

    def aggregate(self):
        """``{(method, m): {metric: (mean, std)}}`` over seeds (population std, exactly rounded)."""
        groups = {}
        for r in self.sorted_rows():
            if r.outcome == "ok":
                groups.setdefault((r.method, r.m), []).append(r)
        out = {}
        for key, rows in groups.items():
            out[key] = {}
            for metric in ("es", "gs", "ls", "mr", "wall_clock_s", "peak_mem_bytes"):
                vals = [float(getattr(r, metric)) for r in rows]
                out[key][metric] = (statistics.mean(vals), statistics.pstdev(vals))
        return out

    def to_csv(self, path, *, with_outcome=False):
        cols = list(RESULT_COLUMNS) + (["outcome"] if with_outcome else [])
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(cols)
            for r in self.sorted_rows():
                w.writerow([_fmt(getattr(r, c)) for c in cols])

    def summary_csv(self, path):
        metrics = ("es", "gs", "ls", "mr", "wall_clock_s", "peak_mem_bytes")
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["method", "m", "n_seeds"] + [f"{k}_{s}" for k in metrics for s in ("mean", "std")])
            agg = self.aggregate()
            counts = {}
            for r in self.rows:
                if r.outcome == "ok":
                    counts[(r.method, r.m)] = counts.get((r.method, r.m), 0) + 1
            for key in sorted(agg):
                w.writerow(list(key) + [counts[key]] + [_fmt(v) for k in metrics for v in agg[key][k]])

    def write_plot_data(self, directory):
        """One file per (method, metric) holding ``m mean std`` lines."""
        os.makedirs(directory, exist_ok=True)
        agg = self.aggregate()
        paths = []
        for method in sorted({k[0] for k in agg}):
            for metric in ("es", "gs", "ls", "mr"):
                path = os.path.join(directory, f"{method}_{metric}.dat")
                with open(path, "w") as f:
                    f.write("# m mean std\n")
                    for (meth, m) in sorted(k for k in agg if k[0] == method):
                        mean, std = agg[(meth, m)][metric]
                        f.write(f"{m} {_fmt(mean)} {_fmt(std)}\n")
                paths.append(path)
        return paths


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def read_results_csv(path):
    rows = []
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            rows.append(EditMetrics(
                rec["method"], int(rec["m"]), int(rec["seed"]), float(rec["es"]), float(rec["gs"]),
                float(rec["ls"]), float(rec["mr"]), float(rec["wall_clock_s"]), int(rec["peak_mem_bytes"]),
                rec.get("outcome", "ok"),
            ))
    return ResultTable(rows)


# ------------------------------------------------------------- experiments

def scaling_curve(editor_config, task, base, m_grid, seeds, *, methods=("malmen", "sum"), deterministic=False,
                  measure_memory=True, progress=None):
    """One :class:`EditMetrics` row per (method, m, seed)."""
    m_grid = list(m_grid)
    if not m_grid or m_grid != sorted(m_grid):
        raise ValueError("m_grid must be a nonempty ascending list")
    seeds = list(seeds)
    if not seeds:
        raise ValueError("at least one seed is required")
    if len(seeds) < 3:
        warnings.warn("fewer than 3 seeds: standard deviations are not meaningful", stacklevel=2)
    table = ResultTable()
    for method in methods:
        for m in m_grid:
            for seed in seeds:
                row = run_method(method, editor_config, task, base, m, seed, deterministic=deterministic,
                                 measure_memory=measure_memory)
                table.rows.append(row)
                if progress is not None:
                    progress(row)
    return table


ABLATIONS = {
    "malmen": {},
    "sum-shifts": {"aggregation": "sum"},
    "no-regularization": {"lambda_init": 1e-300},
    "first-fc": {"editable_layer_policy": "first-fc-last-k"},
    "all-tokens": {"token_policy": "all"},
}


def ablation_suite(editor_config, task, base, seeds, *, m=None, variants=None, deterministic=False, progress=None):
    """Metrics per ablation variant and seed; failures become outcome rows."""
    names = list(ABLATIONS) if variants is None else list(variants)
    unknown = set(names) - set(ABLATIONS)
    if unknown:
        raise ValueError(f"unknown ablation variants {sorted(unknown)}")
    m = editor_config.m_edits if m is None else m
    table = ResultTable()
    for name in names:
        cfg = editor_config.replace(**ABLATIONS[name])
        for seed in seeds:
            try:
                row = run_method("malmen" if cfg.aggregation == "normal_eq" else "sum", cfg, task, base, m, seed,
                                 deterministic=deterministic)
            except (ArithmeticError, ValueError) as exc:  # captured, not propagated
                row = _failed(name, m, seed, f"error: {exc}")
            row = EditMetrics(**{**{f.name: getattr(row, f.name) for f in fields(row)}, "method": name})
            table.rows.append(row)
            if progress is not None:
                progress(row)
    return table
