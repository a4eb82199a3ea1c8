"""Brute-force pilot run behind the committed desk config and test thresholds.

Fits the base model of a config, then trains and evaluates both aggregation
methods over a grid of edit counts and seeds. Writes ``pilot-results.csv``,
``pilot-summary.csv`` and ``pilot-base.bin`` to ``--out``.

    python3 scripts/pilot.py --config configs/desk.json --out pilot --m-grid 8,32,64,128 --seeds 0,1,2
"""
import argparse
import os
import time

from massedit import evaluate, lm, pipeline, tasks


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/desk.json")
    ap.add_argument("--out", default="pilot")
    ap.add_argument("--m-grid", default="8,32,64,128")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--methods", default="malmen,sum")
    args = ap.parse_args()
    cfg = pipeline.ExperimentConfig.load(args.config)
    os.makedirs(args.out, exist_ok=True)
    tc, mc = cfg.task, cfg.model
    task = tasks.generate_synthetic_task(tc.seed, tc.num_facts, tc.vocab_size, tc.prompt_len,
                                         tc.paraphrases_per_fact, num_unrelated=tc.num_unrelated,
                                         answer_len=tc.answer_len, flip_labels=tc.flip_labels,
                                         val_fraction=tc.val_fraction)
    base_path = os.path.join(args.out, "pilot-base.bin")
    if os.path.exists(base_path):
        base = lm.EditableModel.load(base_path)
    else:
        t0 = time.perf_counter()
        base = tasks.fit_base_model_for_task(task, width=mc.width, hidden=mc.hidden, n_blocks=mc.n_blocks,
                                             epochs=mc.epochs, lr=mc.lr, batch_size=mc.batch_size, seed=mc.seed,
                                             nonlinearity=mc.nonlinearity,
                                             editable_policy=cfg.editor.editable_layer_policy, last_k=mc.last_k)
        print(f"base model fitted in {time.perf_counter() - t0:.1f} s", flush=True)
        base.save(base_path, extra_meta={"config_hash": cfg.hash()})
    table = evaluate.scaling_curve(
        cfg.editor, task, base, [int(v) for v in args.m_grid.split(",")], [int(v) for v in args.seeds.split(",")],
        methods=[v for v in args.methods.split(",") if v],
        progress=lambda r: print(f"{r.method:7s} m={r.m:<4d} seed={r.seed} ES={r.es:.3f} GS={r.gs:.3f} "
                                 f"LS={r.ls:.3f} MR={r.mr:.4g} {r.wall_clock_s:.0f}s", flush=True))
    table.to_csv(os.path.join(args.out, "pilot-results.csv"))
    table.summary_csv(os.path.join(args.out, "pilot-summary.csv"))


if __name__ == "__main__":
    main()
