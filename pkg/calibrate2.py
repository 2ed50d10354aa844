"""Scratch: seed-robustness of the chosen config + arch-B transfer."""
import time

import numpy as np

from textdistill.data import build_task
from textdistill.distill import DistillConfig, run_distillation
from textdistill.evaluate import (EvalProtocol, MethodArtifacts,
                                  evaluate_datasets, prepare_method_datasets)
from textdistill.models import GeneratorConfig, GeneratorModel, LearnerConfig
from textdistill.synthesis import pretrain_generator, train_feature_extractor

TASK_KW = dict(n_letters=16, min_len=4, max_len=7)


def main():
    task = build_task("keyword", 1000, 500, seed=0, **TASK_KW)
    cfg_a = LearnerConfig("arch-A", 24, 24)
    cfg_b = LearnerConfig("arch-B", 24, 24)
    proto = EvalProtocol(datasets_per_method=10, runs_per_dataset=3,
                         train_steps=200, lr=0.01, batch=64, metric="accuracy")

    base = GeneratorModel(task.train.vocab, GeneratorConfig(32, 48), seed=1)
    pretrain_generator(base, task.train, steps=1500, lr=3e-3, batch=64, seed=2,
                       max_len=12)
    extractor = train_feature_extractor(task.train, cfg_a, seed=3)
    ff = extractor.features_np
    arts = MethodArtifacts(vanilla_generator=base, feature_fn=ff, max_gen_len=12)

    def run_eval(tag, method, learner_cfg, eval_seed):
        datasets = prepare_method_datasets(task, method, 5, proto, arts,
                                           cfg_a, seed=17)
        scores, failed = evaluate_datasets(datasets, task.test, proto,
                                           learner_cfg, seed=eval_seed)
        print(f"  {tag}: mean={np.mean(scores):.4f} std={np.std(scores):.4f} "
              f"n={len(scores)}")
        return float(np.mean(scores))

    print("arch-A baselines:")
    run_eval("random  A", "random", cfg_a, 18)
    run_eval("vanilla A", "vanilla_lm", cfg_a, 18)
    print("arch-B baselines:")
    run_eval("random  B", "random", cfg_b, 19)
    run_eval("vanilla B", "vanilla_lm", cfg_b, 19)

    for dseed in (4, 5, 6):
        gen = base.clone()
        cfg = DistillConfig(outer_steps=40, inner_steps=10, learner_steps=5,
                            real_batch=128, syn_batch=32, gen_interval=10,
                            learner_lr=0.1, gen_lr=1e-3, teacher_set_count=10,
                            top_p=0.95, length_normalize=True, max_gen_len=12,
                            learner_batch=64, seed=dseed)
        t0 = time.time()
        gen, rows = run_distillation(cfg, task.train, gen, cfg_a, feature_fn=ff)
        gm = np.array([r["gm_loss"] for r in rows])
        k = len(gm) // 10
        arts.generator = gen
        print(f"distill seed={dseed} ({time.time()-t0:.0f}s) "
              f"gm {np.median(gm[:k]):.4f}->{np.median(gm[-k:]):.4f}:")
        run_eval(f"dilm A s{dseed}", "dilm", cfg_a, 18)
        run_eval(f"dilm B s{dseed}", "dilm", cfg_b, 19)


if __name__ == "__main__":
    main()
