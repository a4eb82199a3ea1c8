"""Command-line entry point: ``massedit <command> --config C --out DIR``.

Every command writes its artifacts under ``--out`` with the config hash in
the file name and a ``manifest-<command>-<hash>.json`` recording the hash,
seed and files. Existing artifacts are never replaced without ``--force``.
On failure an ``error-<command>-<hash>.json`` record lists the partial
outputs and the exit status is nonzero.

The thread count of the numerical backend is read from
``MASSEDIT_NUM_THREADS``; ``--deterministic`` pins it to 1 and writes every
wall-clock field as 0.
"""
import functools
import json
import os
import sys
import traceback

import click
from threadpoolctl import threadpool_limits

from . import evaluate, gradcheck, lm, pipeline, tasks
from .hypernet import HyperNetwork

THREADS_ENV = "MASSEDIT_NUM_THREADS"


class Run:
    """Bookkeeping for one command invocation."""

    def __init__(self, command, config, out, seed, deterministic, force):
        self.command = command
        self.config = config
        self.out = out
        self.seed = seed
        self.deterministic = deterministic
        self.force = force
        self.hash = config.hash()
        self.written = []
        os.makedirs(out, exist_ok=True)

    def path(self, name):
        """Target path for an artifact; refuses to clobber without ``--force``."""
        path = os.path.join(self.out, name)
        if os.path.exists(path) and not self.force:
            raise click.ClickException(f"{path} exists; pass --force to overwrite")
        self.written.append(path)
        return path

    def stamp(self):
        return {"config_hash": self.hash, "seed": self.seed}

    def manifest(self, extra=None):
        record = {"command": self.command, "status": "complete", **self.stamp(),
                  "config": self.config.to_dict(), "deterministic": self.deterministic,
                  "artifacts": sorted(os.path.basename(p) for p in self.written)}
        if extra:
            record.update(extra)
        path = self.path(f"manifest-{self.command}-{self.hash}.json")
        _write_json(path, record)

    def fail(self, exc):
        record = {"command": self.command, "status": "failed", **self.stamp(),
                  "error_type": type(exc).__name__, "message": str(exc),
                  "partial_outputs": sorted(os.path.basename(p) for p in self.written if os.path.exists(p))}
        _write_json(os.path.join(self.out, f"error-{self.command}-{self.hash}.json"), record)


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _threads(deterministic):
    if deterministic:
        return 1
    value = os.environ.get(THREADS_ENV)
    return int(value) if value else None


def _load_config(path, seed, command):
    config = pipeline.ExperimentConfig.load(path) if path else pipeline.ExperimentConfig()
    if seed is not None:
        config = config.with_seed(seed)
        if command == "gen-task":
            config = pipeline.ExperimentConfig(
                config.editor, pipeline.TaskConfig(**{**config.task.__dict__, "seed": seed}),
                pipeline.ModelConfig(**{**config.model.__dict__, "seed": seed}))
    return config


def command(name):
    """Shared options, config loading, thread limits and failure records."""

    def wrap(fn):
        @click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                      help="JSON config; defaults apply to missing keys.")
        @click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory.")
        @click.option("--seed", type=int, default=None, help="Override the seed.")
        @click.option("--deterministic", is_flag=True, help="Single-threaded, wall-clock fields written as 0.")
        @click.option("--force", is_flag=True, help="Overwrite existing artifacts.")
        @functools.wraps(fn)
        def inner(config_path, out, seed, deterministic, force, **kwargs):
            try:
                config = _load_config(config_path, seed, name)
            except (ValueError, TypeError) as exc:
                raise click.ClickException(f"invalid config: {exc}")
            effective_seed = config.task.seed if name == "gen-task" else config.editor.seed
            run = Run(name, config, out, effective_seed, deterministic, force)
            try:
                with threadpool_limits(limits=_threads(deterministic)):
                    status = fn(run, **kwargs)
            except click.ClickException as exc:
                run.fail(exc)
                raise
            except Exception as exc:  # recorded, then reported through the exit status
                run.fail(exc)
                click.echo(traceback.format_exc(), err=True)
                raise click.ClickException(f"{type(exc).__name__}: {exc}")
            if status:
                sys.exit(status)

        return main.command(name)(inner)

    return wrap


@click.group()
@click.version_option(package_name="massedit")
def main():
    """Batch editing of language-model facts with a learned gradient editor."""


# ------------------------------------------------------------------ helpers

def _load_task_dir(task_dir):
    with open(os.path.join(task_dir, "task-manifest.json")) as f:
        manifest = json.load(f)
    task = tasks.EditTask.load(os.path.join(task_dir, manifest["task"]))
    base = lm.EditableModel.load(os.path.join(task_dir, manifest["base_model"]))
    return task, base


def _editable(base, run):
    cfg = run.config
    return base.with_editable(lm.select_editable(base.n_blocks, cfg.editor.editable_layer_policy, cfg.model.last_k))


task_option = click.option("--task", "task_dir", required=True, type=click.Path(exists=True, file_okay=False),
                           help="Directory written by gen-task.")


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {text!r}")


# ----------------------------------------------------------------- commands

@command("gen-task")
@click.option("--from-jsonl", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Ingest a qa-jsonl / fc-jsonl file instead of generating a synthetic task.")
@click.option("--format", "fmt", type=click.Choice(tasks.FORMATS), default="qa-jsonl")
@click.option("--vocab", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Vocabulary file (one token per line) for --from-jsonl.")
def gen_task(run, from_jsonl, fmt, vocab):
    """Write an edit task and a base model pretrained on it."""
    tc, mc = run.config.task, run.config.model
    if from_jsonl:
        voc = tasks.Vocabulary.load(vocab) if vocab else None
        task, voc = tasks.load_dataset(from_jsonl, fmt, voc)
    else:
        task = tasks.generate_synthetic_task(
            tc.seed, tc.num_facts, tc.vocab_size, tc.prompt_len, tc.paraphrases_per_fact,
            num_unrelated=tc.num_unrelated, answer_len=tc.answer_len, flip_labels=tc.flip_labels,
            val_fraction=tc.val_fraction)
    task.meta.update(run.stamp())
    task_name, base_name = f"task-{run.hash}.json", f"base_model-{run.hash}.bin"
    task.save(run.path(task_name))
    base = tasks.fit_base_model_for_task(
        task, width=mc.width, hidden=mc.hidden, n_blocks=mc.n_blocks, epochs=mc.epochs, lr=mc.lr,
        batch_size=mc.batch_size, seed=mc.seed, nonlinearity=mc.nonlinearity,
        editable_policy=run.config.editor.editable_layer_policy, last_k=mc.last_k)
    base.save(run.path(base_name), extra_meta=run.stamp())
    _write_json(run.path("task-manifest.json"), {"task": task_name, "base_model": base_name, **run.stamp()})
    run.manifest({"edits": len(task), "unrelated": len(task.unrelated_pool)})
    click.echo(f"task: {len(task)} edits, {len(task.unrelated_pool)} unrelated tuples -> {run.out}")


@command("train-editor")
@task_option
def train_editor_cmd(run, task_dir):
    """Meta-train an editor and write its checkpoint and training log."""
    task, base = _load_task_dir(task_dir)
    cfg = run.config.editor
    model, h = pipeline.prepare_editor(_editable(base, run), cfg)
    h, log, opt = pipeline.train_editor(h, model, task, cfg, deterministic=run.deterministic)
    ckpt = run.path(f"editor-{run.hash}.bin")
    h.save(ckpt, optimizer=opt, extra_meta=run.stamp())
    log.checkpoint = os.path.basename(ckpt)
    log.to_csv(run.path(f"trainlog-{run.hash}.csv"))
    run.manifest({"steps": len(log)})
    click.echo(f"trained {len(log)} steps -> {ckpt}")


@command("edit")
@task_option
@click.option("--editor", "editor_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--m", "m", type=int, default=None, help="Number of edits (default: config m_edits).")
@click.option("--split", type=click.Choice(tasks.SPLITS), default="val")
def edit_cmd(run, task_dir, editor_path, m, split):
    """Apply a trained editor to the base model and write the edited checkpoint."""
    task, base = _load_task_dir(task_dir)
    cfg = run.config.editor
    h = HyperNetwork.load(editor_path)
    model = base.with_editable(h.layers)
    m = m or cfg.m_edits
    _, es = tasks.eval_split(task, m, [cfg.seed, m], split=split)
    post, results, _ = pipeline.editor_inference(h, model, es.edits, cfg)
    post.save(run.path(f"post_model-{run.hash}.bin"), extra_meta={**run.stamp(), "m": m})
    report = pipeline.residual_report_of(results)
    report.to_csv(run.path(f"residuals-{run.hash}.csv"))
    run.manifest({"m": m, "mr": report.mean_residual, "mr_excluded": report.excluded})
    click.echo(f"edited {m} facts, mean residual {report.mean_residual:.6g}")


@command("eval")
@task_option
@click.option("--editor", "editor_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--post-model", "post_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--oracle", is_flag=True, help="Score a lookup model that stores every tuple of the task.")
@click.option("--m", "m", type=int, default=None)
@click.option("--split", type=click.Choice(tasks.SPLITS), default="val")
@click.option("--reduction", type=click.Choice(evaluate.REDUCTIONS), default="sequence")
def eval_cmd(run, task_dir, editor_path, post_path, oracle, m, split, reduction):
    """Write ES / GS / LS for one model (edited, stored, oracle or unedited)."""
    if sum(bool(x) for x in (editor_path, post_path, oracle)) > 1:
        raise click.UsageError("choose at most one of --editor, --post-model, --oracle")
    task, base = _load_task_dir(task_dir)
    cfg = run.config.editor
    m = m or cfg.m_edits
    _, es = tasks.eval_split(task, m, [cfg.seed, m], split=split)
    mr = float("nan")
    if oracle:
        post, method = evaluate.LookupModel.from_task(task), "oracle"
    elif post_path:
        post, method = lm.EditableModel.load(post_path), "post-model"
    elif editor_path:
        h = HyperNetwork.load(editor_path)
        post, results, _ = pipeline.editor_inference(h, base.with_editable(h.layers), es.edits, cfg)
        mr = pipeline.residual_report_of(results).mean_residual
        method = cfg.aggregation
    else:
        post, method = base, "unedited"
    metrics = evaluate.compute_metrics(base, post, es, reduction=reduction, method=method, m=m, seed=cfg.seed, mr=mr)
    evaluate.ResultTable([metrics]).to_csv(run.path(f"metrics-{run.hash}.csv"))
    run.manifest({"reduction": reduction})
    click.echo(f"{method}: ES {metrics.es:.4f} GS {metrics.gs:.4f} LS {metrics.ls:.4f}")


@command("scaling-curve")
@task_option
@click.option("--m-grid", default="8,32,128", show_default=True)
@click.option("--seeds", default="0,1,2", show_default=True)
@click.option("--methods", default="malmen,sum", show_default=True)
def scaling_cmd(run, task_dir, m_grid, seeds, methods):
    """Metrics over an ascending grid of edit counts, per method and seed."""
    task, base = _load_task_dir(task_dir)
    methods = [s.strip() for s in methods.split(",") if s.strip()]
    table = evaluate.scaling_curve(run.config.editor, task, _editable(base, run), _int_list(m_grid),
                                   _int_list(seeds), methods=methods, deterministic=run.deterministic,
                                   progress=lambda r: click.echo(f"{r.method} m={r.m} seed={r.seed} "
                                                                 f"ES={r.es:.3f} GS={r.gs:.3f} LS={r.ls:.3f}"))
    table.to_csv(run.path(f"scaling-{run.hash}.csv"))
    table.summary_csv(run.path(f"scaling-{run.hash}-summary.csv"))
    for p in table.write_plot_data(os.path.join(run.out, f"plots-{run.hash}")):
        run.written.append(p)
    run.manifest()


@command("ablate")
@task_option
@click.option("--seeds", default="0,1,2", show_default=True)
@click.option("--m", "m", type=int, default=None)
@click.option("--variants", default=",".join(evaluate.ABLATIONS), show_default=True)
def ablate_cmd(run, task_dir, seeds, m, variants):
    """Metrics for each ablation variant; failures are recorded as outcome rows."""
    task, base = _load_task_dir(task_dir)
    names = [v.strip() for v in variants.split(",") if v.strip()]
    table = evaluate.ablation_suite(run.config.editor, task, _editable(base, run), _int_list(seeds), m=m,
                                    variants=names, deterministic=run.deterministic,
                                    progress=lambda r: click.echo(f"{r.method} seed={r.seed}: {r.outcome}"))
    table.to_csv(run.path(f"ablation-{run.hash}.csv"), with_outcome=True)
    run.manifest()


@command("gradcheck")
@click.option("--fixture", type=click.Path(exists=True, file_okay=False), default=gradcheck.FIXTURE_DIR,
              show_default=False, help="Fixture directory (default: the packaged tiny fixture).")
def gradcheck_cmd(run, fixture):
    """Verify adjoints, decomposition and batch invariance; write a pass/fail report."""
    results = gradcheck.run_all(fixture, seed=run.seed)
    report = gradcheck.write_report(results, run.path(f"gradcheck-{run.hash}.json"))
    for r in results:
        click.echo(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: max rel err {r.max_rel_err:.3e} (tol {r.tol:g})")
    run.manifest({"passed": report["passed"]})
    return 0 if report["passed"] else 1


if __name__ == "__main__":
    main()
