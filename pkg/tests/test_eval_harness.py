import csv
import math
import statistics

import numpy as np
import pytest

from massedit import evaluate, pipeline, tasks
from massedit.evaluate import EditMetrics, LookupModel, ResultTable, compute_metrics
from massedit.lm import Batch
from massedit.tasks import EvalSplit


class FixedModel:
    """Predicts from a prompt -> answer table; unknown prompts get all zeros."""

    def __init__(self, table):
        self.table = table

    def predict(self, batch):
        return [np.array(self.table.get(p, (0,) * len(a))) for p, a in zip(batch.prompts, batch.answers)]


def _split():
    edits = Batch(((1, 2), (3, 4), (5, 6), (7, 8)), ((9,), (10,), (11,), (12,)))
    equiv = Batch(((2, 1), (4, 3)), ((9, 1), (10, 2)))
    unrel = Batch(((13, 14),), ((15,),))
    return EvalSplit(edits, equiv, unrel)


def _toy():
    task = tasks.generate_synthetic_task(0, 48, 48, 4, 1, num_unrelated=24, flip_labels=False)
    base = tasks.fit_base_model_for_task(task, width=4, hidden=8, n_blocks=1, epochs=20, seed=0, last_k=1)
    cfg = pipeline.EditorConfig(rank=4, steps=3, m_edits=2, eta_init=1e-2, meta_lr=1e-3, sub_batch_size=4)
    return task, base, cfg


@pytest.fixture(scope="module")
def toy():
    return _toy()


# ------------------------------------------------------------ compute_metrics

def test_oracle_lookup_gives_perfect_edit_and_generalization():
    task = tasks.generate_synthetic_task(3, 64, 64, 4, 2, num_unrelated=16)
    _, split = tasks.eval_split(task, 8, 0, split="val")
    met = compute_metrics(None, LookupModel.from_task(task), split)
    assert (met.es, met.gs, met.ls) == (1.0, 1.0, 1.0)


def test_unchanged_model_correct_on_unrelated_pool_keeps_locality():
    split = _split()
    pre = FixedModel({(13, 14): (15,)})
    assert compute_metrics(pre, pre, split).ls == 1.0


def test_hand_enumerated_split():
    # edits 1-3 right, edit 4 wrong; equivalents: one fully right, one half right
    model = FixedModel({(1, 2): (9,), (3, 4): (10,), (5, 6): (11,), (7, 8): (0,),
                        (2, 1): (9, 1), (4, 3): (10, 0), (13, 14): (0,)})
    met = compute_metrics(None, model, _split())
    assert met.es == 0.75 and met.gs == 0.5 and met.ls == 0.0 and met.m == 4
    tok = compute_metrics(None, model, _split(), reduction="token")
    assert tok.gs == 0.75
    per = compute_metrics(None, model, _split(), reduction="token-per-example")
    assert per.gs == 0.75


def test_token_reductions_differ_on_unequal_lengths():
    split = EvalSplit(Batch(((1,), (2,)), ((3,), (4, 5, 6))), Batch(((1,),), ((3,),)), Batch(((1,),), ((3,),)))
    model = FixedModel({(1,): (3,), (2,): (4, 0, 0)})
    assert compute_metrics(None, model, split, reduction="sequence").es == 0.5
    assert compute_metrics(None, model, split, reduction="token").es == 0.5
    assert compute_metrics(None, model, split, reduction="token-per-example").es == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        compute_metrics(None, model, split, reduction="mean")


def test_empty_split_rejected():
    split = _split()
    with pytest.raises(ValueError):
        compute_metrics(None, FixedModel({}), EvalSplit(split.edits, Batch((), ()), split.unrelated))


def test_order_invariance_and_purity(toy):
    task, base, _ = toy
    _, split = tasks.eval_split(task, 8, 1, split="val")
    ref = compute_metrics(base, base, split)
    rng = np.random.default_rng(0)
    for _ in range(3):
        shuffled = EvalSplit(*(b.select(rng.permutation(len(b))) for b in (split.edits, split.equivalents,
                                                                              split.unrelated)))
        assert compute_metrics(base, base, shuffled) == ref
    assert compute_metrics(base, base, split) == ref


def test_metrics_bounds_enforced():
    with pytest.raises(ValueError):
        EditMetrics("x", 1, 0, 1.5, 0.0, 0.0)


# ------------------------------------------------------------------- tables

def _rows():
    return [EditMetrics("malmen", m, s, 0.5 + 0.1 * s, 0.25 * s, 1.0, 0.01 * (s + 1), 1.0 + s, 100 * m)
            for m in (8, 32) for s in (0, 1, 2)]


def test_aggregates_recomputable_from_raw_rows(tmp_path):
    table = ResultTable(_rows()[::-1])
    path = tmp_path / "r.csv"
    table.to_csv(path)
    with open(path) as f:
        assert f.readline().strip() == "method,m,seed,es,gs,ls,mr,wall_clock_s,peak_mem_bytes"
    back = evaluate.read_results_csv(path)
    assert back.sorted_rows() == table.sorted_rows()
    agg = back.aggregate()
    for (method, m), stats in agg.items():
        rows = [r for r in _rows() if r.m == m]
        for metric, (mean, std) in stats.items():
            vals = [float(getattr(r, metric)) for r in rows]
            assert mean == statistics.mean(vals) and std == statistics.pstdev(vals)
    summary = tmp_path / "s.csv"
    table.summary_csv(summary)
    with open(summary) as f:
        recs = list(csv.DictReader(f))
    assert [(r["method"], r["m"], r["n_seeds"]) for r in recs] == [("malmen", "8", "3"), ("malmen", "32", "3")]
    assert float(recs[0]["es_mean"]) == agg[("malmen", 8)]["es"][0]


def test_identical_seeds_have_zero_std():
    rows = [EditMetrics("sum", 8, s, 0.5, 0.5, 0.5, 0.1) for s in range(3)]
    stats = ResultTable(rows).aggregate()[("sum", 8)]
    assert all(stats[k][1] == 0.0 for k in ("es", "gs", "ls", "mr"))


def test_failed_rows_kept_but_not_aggregated(tmp_path):
    rows = _rows() + [evaluate._failed("no-regularization", 8, 0, "singular: pivot 0")]
    table = ResultTable(rows)
    assert ("no-regularization", 8) not in table.aggregate()
    path = tmp_path / "r.csv"
    table.to_csv(path, with_outcome=True)
    back = evaluate.read_results_csv(path)
    assert back.sorted_rows()[-1].outcome == "singular: pivot 0"
    assert math.isnan(back.sorted_rows()[-1].es)


def test_plot_data_triples(tmp_path):
    paths = ResultTable(_rows()).write_plot_data(tmp_path / "plot")
    assert sorted(p.rsplit("/", 1)[1] for p in paths) == ["malmen_es.dat", "malmen_gs.dat", "malmen_ls.dat",
                                                         "malmen_mr.dat"]
    lines = open(tmp_path / "plot" / "malmen_ls.dat").read().splitlines()
    assert lines == ["# m mean std", "8 1.0 0.0", "32 1.0 0.0"]


# -------------------------------------------------------------- experiments

def test_single_m_single_seed_gives_one_row(toy):
    task, base, cfg = toy
    with pytest.warns(UserWarning, match="fewer than 3 seeds"):
        table = evaluate.scaling_curve(cfg, task, base, [2], [0], methods=["malmen"], deterministic=True)
    assert len(table.rows) == 1
    row = table.rows[0]
    assert (row.method, row.m, row.seed, row.outcome) == ("malmen", 2, 0, "ok")
    assert row.wall_clock_s == 0.0 and row.peak_mem_bytes > 0


def test_scaling_curve_rejects_bad_grids(toy):
    task, base, cfg = toy
    for grid in ([], [4, 2]):
        with pytest.raises(ValueError):
            evaluate.scaling_curve(cfg, task, base, grid, [0, 1, 2])


def test_mr_is_plumbed_from_residual_report(toy):
    task, base, cfg = toy
    row = evaluate.run_method("malmen", cfg, task, base, 2, 0, deterministic=True, measure_memory=False)
    c = cfg.replace(seed=0, m_edits=2)
    model, h = pipeline.prepare_editor(base, c)
    h, _, _ = pipeline.train_editor(h, model, task, c, deterministic=True)
    _, split = tasks.eval_split(task, 2, [0, 1002], split="val")
    _, results, _ = pipeline.editor_inference(h, model, split.edits, c)
    assert row.mr == pipeline.residual_report_of(results).mean_residual


def test_default_only_ablation_reproduces_compute_metrics(toy):
    task, base, cfg = toy
    table = evaluate.ablation_suite(cfg, task, base, [0], variants=["malmen"], deterministic=True)
    direct = evaluate.run_method("malmen", cfg, task, base, cfg.m_edits, 0, deterministic=True)
    assert table.rows == [direct]


def test_ablation_failures_are_captured(toy):
    task, base, cfg = toy
    # two answer tokens against an 8-wide key space: the unregularized system is singular
    table = evaluate.ablation_suite(cfg, task, base, [0, 1], variants=["no-regularization"], deterministic=True)
    assert [r.method for r in table.rows] == ["no-regularization"] * 2
    assert all(r.outcome.startswith("singular") and math.isnan(r.es) for r in table.rows)
    with pytest.raises(ValueError):
        evaluate.ablation_suite(cfg, task, base, [0], variants=["bogus"])


def test_finetune_method_runs(toy):
    task, base, cfg = toy
    row = evaluate.run_method("finetune", cfg, task, base, 2, 0, deterministic=True)
    assert row.outcome == "ok" and math.isnan(row.mr)
    with pytest.raises(ValueError):
        evaluate.run_method("rome", cfg, task, base, 2, 0)
