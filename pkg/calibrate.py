"""Scratch calibration harness (not part of the package)."""
import sys
import time

import numpy as np

from textdistill.coreset import random_select
from textdistill.data import LabeledDataset, build_task
from textdistill.distill import DistillConfig, run_distillation
from textdistill.evaluate import (EvalProtocol, MethodArtifacts,
                                  prepare_method_datasets, evaluate_datasets)
from textdistill.models import GeneratorConfig, GeneratorModel, LearnerConfig
from textdistill.seeds import child_seed, rng_for
from textdistill.synthesis import (generate_distilled, pretrain_generator,
                                   train_feature_extractor)

TASK_KW = dict(n_letters=16, min_len=4, max_len=7)
TRIG0, TRIG1 = set(range(4)), set(range(4, 8))


def quality(gen, n=400):
    stats = []
    for c, good, bad in ((0, TRIG0, TRIG1), (1, TRIG1, TRIG0)):
        samples = gen.sample_batch(c, n, top_p=0.95, max_len=10,
                                   rng=rng_for(123, "q", c), allow_sep=False)
        ok = sum(1 for s in samples if set(s.tokens) & good
                 and not set(s.tokens) & bad)
        dens = np.mean([sum(t in good for t in s.tokens) / max(len(s.tokens), 1)
                        for s in samples])
        lens = np.mean([len(s.tokens) for s in samples])
        stats.append((ok / n, float(dens), float(lens)))
    return stats


def main(alphas):
    task = build_task("keyword", 1000, 500, seed=0, **TASK_KW)
    learner_cfg = LearnerConfig("arch-A", 24, 24)
    proto = EvalProtocol(datasets_per_method=8, runs_per_dataset=2,
                         train_steps=200, lr=0.01, batch=64, metric="accuracy")

    t0 = time.time()
    base = GeneratorModel(task.train.vocab, GeneratorConfig(32, 48), seed=1)
    pretrain_generator(base, task.train, steps=1500, lr=3e-3, batch=64, seed=2,
                       max_len=12)
    print(f"pretrained in {time.time()-t0:.0f}s; vanilla quality {quality(base)}")

    extractor = train_feature_extractor(task.train, learner_cfg, seed=3)
    ff = extractor.features_np

    def evaluate(tag, artifacts, method):
        t1 = time.time()
        datasets = prepare_method_datasets(task, method, 5, proto, artifacts,
                                           learner_cfg, seed=17)
        scores, failed = evaluate_datasets(datasets, task.test, proto,
                                           learner_cfg, seed=18)
        print(f"  {tag}: mean={np.mean(scores):.4f} std={np.std(scores):.4f} "
              f"n={len(scores)} failed={failed} ({time.time()-t1:.0f}s)")
        return float(np.mean(scores))

    arts = MethodArtifacts(vanilla_generator=base, feature_fn=ff,
                           max_gen_len=12)
    evaluate("random ", arts, "random")
    evaluate("vanilla", arts, "vanilla_lm")

    for alpha in alphas:
        for outer in (40, 80):
            gen = base.clone()
            cfg = DistillConfig(outer_steps=outer, inner_steps=10,
                                learner_steps=5, real_batch=128, syn_batch=32,
                                gen_interval=10, learner_lr=0.1, gen_lr=alpha,
                                teacher_set_count=10, top_p=0.95,
                                length_normalize=True, max_gen_len=12,
                                learner_batch=64, seed=4)
            t1 = time.time()
            gen, rows = run_distillation(cfg, task.train, gen, learner_cfg,
                                         feature_fn=ff)
            gm = np.array([r["gm_loss"] for r in rows])
            k = max(len(gm) // 10, 1)
            print(f"alpha={alpha} outer={outer}: distilled in "
                  f"{time.time()-t1:.0f}s; "
                  f"gm median first10%={np.median(gm[:k]):.4f} "
                  f"last10%={np.median(gm[-k:]):.4f}; quality {quality(gen)}")
            arts.generator = gen
            evaluate(f"dilm(a={alpha},S={outer})", arts, "dilm")


if __name__ == "__main__":
    main([float(a) for a in sys.argv[1:]] or [1e-3])
