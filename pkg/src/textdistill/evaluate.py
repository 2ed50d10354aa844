"""Evaluation protocol: train fresh learners on candidate datasets for a
fixed step budget, score on the held-out split, and report mean +/- std over
many (dataset, init) runs with Welch's t-test against a baseline method.

Runs are embarrassingly parallel; pass workers>1 to fan them out over
processes. Results are reduced in deterministic job order either way.
"""
from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import stdtr

from . import autodiff as ad
from .coreset import herding_select, kcenters_select, random_select
from .data import LabeledDataset
from .distill import run_distillation
from .models import LearnerConfig, LearnerModel
from .optim import Optimizer, OptimizerError, warmup_cosine
from .seeds import child_seed, rng_for
from .synthesis import generate_distilled, train_feature_extractor


@dataclass
class EvalProtocol:
    datasets_per_method: int = 20
    runs_per_dataset: int = 5
    train_steps: int = 200
    lr: float = 1e-4
    batch: int = 64
    warmup_ratio: float = 0.5
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    metric: str = "accuracy"  # or "acc_f1_mean"

    @property
    def total_runs(self):
        return self.datasets_per_method * self.runs_per_dataset

    def to_dict(self):
        from dataclasses import asdict
        return asdict(self)


@dataclass
class EvalReport:
    method: str
    arch: str
    dpc: int
    scores: list
    failed_runs: int = 0
    baseline: str = None
    p_value: float = None
    extra: dict = field(default_factory=dict)

    @property
    def mean(self):
        return float(np.mean(self.scores)) if self.scores else float("nan")

    @property
    def std(self):
        return float(np.std(self.scores, ddof=1)) if len(self.scores) > 1 else 0.0


# ---------------------------------------------------------------------------
# metrics and the significance test
# ---------------------------------------------------------------------------


def accuracy(pred, truth):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    return float((pred == truth).mean())


def f1_binary(pred, truth, positive=1):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    tp = int(((pred == positive) & (truth == positive)).sum())
    fp = int(((pred == positive) & (truth != positive)).sum())
    fn = int(((pred != positive) & (truth == positive)).sum())
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def compute_metric(metric, pred, truth):
    if metric == "accuracy":
        return accuracy(pred, truth)
    if metric == "acc_f1_mean":
        return 0.5 * (accuracy(pred, truth) + f1_binary(pred, truth))
    raise ValueError(f"unknown metric {metric!r}")


@dataclass
class WelchResult:
    t: float
    df: float
    p: float


def welch_t_test(xs, ys):
    """Two-sided Welch's t-test (unequal variances)."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    n1, n2 = len(xs), len(ys)
    if n1 < 2 or n2 < 2:
        raise ValueError("need at least two observations per group")
    m1, m2 = xs.mean(), ys.mean()
    v1 = xs.var(ddof=1)
    v2 = ys.var(ddof=1)
    se2 = v1 / n1 + v2 / n2
    if se2 == 0.0:
        return WelchResult(0.0, float(n1 + n2 - 2), 1.0 if m1 == m2 else 0.0)
    t = (m1 - m2) / np.sqrt(se2)
    df = se2**2 / ((v1 / n1) ** 2 / (n1 - 1) + (v2 / n2) ** 2 / (n2 - 1))
    p = 2.0 * float(stdtr(df, -abs(t)))
    return WelchResult(float(t), float(df), p)


# ---------------------------------------------------------------------------
# scoring a single candidate dataset
# ---------------------------------------------------------------------------


def train_and_score(train_ds, test_ds, learner_cfg, protocol, seed):
    """Fresh learner, fixed-step training on train_ds, metric on test_ds.
    Returns nan when training diverges (callers count those as failed runs)."""
    learner = LearnerModel(train_ds.vocab, train_ds.num_classes, learner_cfg,
                           seed=child_seed(seed, "init"))
    opt = Optimizer(learner.params, "adamw", lr=protocol.lr,
                    weight_decay=protocol.weight_decay,
                    clip_norm=protocol.clip_norm)
    rng = rng_for(seed, "batches")
    samples = train_ds.all_samples()
    try:
        for step in range(protocol.train_steps):
            idx = rng.integers(0, len(samples), size=protocol.batch)
            loss = learner.loss_node([samples[int(i)] for i in idx])
            if not np.isfinite(loss.item()):
                return float("nan")
            ad.backward(loss)
            opt.step(lr_scale=warmup_cosine(step, protocol.train_steps,
                                            protocol.warmup_ratio))
    except OptimizerError:
        return float("nan")
    test_samples = test_ds.all_samples()
    pred = learner.predict(test_samples)
    truth = np.array([s.label for s in test_samples])
    return compute_metric(protocol.metric, pred, truth)


def _eval_job(args):
    train_ds, test_ds, learner_cfg, protocol, seed = args
    return train_and_score(train_ds, test_ds, learner_cfg, protocol, seed)


def evaluate_datasets(datasets, test_ds, protocol, learner_cfg, seed,
                      workers=1, runs_per_dataset=None):
    """Score every (dataset, run) pair; returns (scores, failed_count)."""
    runs = runs_per_dataset or protocol.runs_per_dataset
    jobs = []
    for i, ds in enumerate(datasets):
        for j in range(runs):
            jobs.append((ds, test_ds, learner_cfg, protocol,
                         child_seed(seed, "run", i, j)))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_eval_job, jobs, chunksize=4))
    else:
        results = [_eval_job(job) for job in jobs]
    scores = [r for r in results if np.isfinite(r)]
    return scores, len(results) - len(scores)


# ---------------------------------------------------------------------------
# method preparation and comparisons
# ---------------------------------------------------------------------------

METHODS = ("random", "kcenters", "herding", "vanilla_lm", "dilm")


@dataclass
class MethodArtifacts:
    """Trained inputs the sampled methods need: the distillation-trained
    generator (dilm), the pretrained-only generator (vanilla_lm), and the
    feature extractor behind every center/herding selection."""

    generator: object = None
    vanilla_generator: object = None
    feature_fn: object = None
    oversample: int = 100
    top_p: float = 0.95
    max_gen_len: int = 32


def ensure_feature_fn(artifacts, task, learner_cfg, seed):
    if artifacts.feature_fn is None:
        extractor = train_feature_extractor(task.train, learner_cfg,
                                            seed=child_seed(seed, "features"))
        artifacts.feature_fn = extractor.features_np
    return artifacts.feature_fn


def prepare_method_datasets(task, method, dpc, protocol, artifacts, learner_cfg,
                            seed):
    """Candidate training sets for one method: n seeded variants for sampled
    methods, a single dataset for deterministic herding."""
    n = protocol.datasets_per_method
    train = task.train
    if method == "random":
        sels = [random_select(train, dpc, seed=child_seed(seed, "random", i))
                for i in range(n)]
        return [LabeledDataset(s.samples(train), train.vocab) for s in sels]
    if method == "kcenters":
        ff = ensure_feature_fn(artifacts, task, learner_cfg, seed)
        sels = [kcenters_select(train, dpc, ff, seed=child_seed(seed, "kc", i))
                for i in range(n)]
        return [LabeledDataset(s.samples(train), train.vocab) for s in sels]
    if method == "herding":
        ff = ensure_feature_fn(artifacts, task, learner_cfg, seed)
        sel = herding_select(train, dpc, ff)
        return [LabeledDataset(sel.samples(train), train.vocab)]
    if method in ("dilm", "vanilla_lm"):
        gen = artifacts.generator if method == "dilm" else artifacts.vanilla_generator
        if gen is None:
            raise ValueError(f"missing method artifact: {method} needs a "
                             f"{'trained' if method == 'dilm' else 'pretrained'} "
                             f"generator checkpoint")
        ff = ensure_feature_fn(artifacts, task, learner_cfg, seed)
        out = []
        for i in range(n):
            dd = generate_distilled(gen, ff, dpc, oversample=artifacts.oversample,
                                    top_p=artifacts.top_p,
                                    max_len=artifacts.max_gen_len,
                                    seed=child_seed(seed, method, i),
                                    allow_sep=task.is_pair)
            out.append(dd.to_labeled(train.vocab))
        return out
    raise ValueError(f"unknown method {method!r} (choose from {METHODS})")


def compare_methods(task, methods, dpc, protocol, artifacts, learner_cfg, seed,
                    workers=1, baseline="kcenters"):
    """One report per method; p-values are Welch tests against the baseline
    method's scores (the first method if the baseline was not evaluated)."""
    reports = []
    score_map = {}
    for method in methods:
        datasets = prepare_method_datasets(task, method, dpc, protocol,
                                           artifacts, learner_cfg, seed)
        runs = None
        if method == "herding":  # deterministic: spread runs over learner seeds
            runs = protocol.total_runs
        scores, failed = evaluate_datasets(datasets, task.test, protocol,
                                           learner_cfg,
                                           seed=child_seed(seed, "eval", method),
                                           workers=workers, runs_per_dataset=runs)
        score_map[method] = scores
        reports.append(EvalReport(method, learner_cfg.arch, dpc, scores, failed))
    base = baseline if baseline in score_map else methods[0]
    for report in reports:
        report.baseline = base
        report.p_value = welch_t_test(report.scores, score_map[base]).p
    return reports


def dpc_sweep(task, method, dpc_list, protocol, artifacts, learner_cfg, seed,
              workers=1, csv_path=None, svg_path=None):
    """One report per distilled-set size; optionally writes the CSV and the
    CI-band SVG plot."""
    reports = []
    for dpc in dpc_list:
        datasets = prepare_method_datasets(task, method, dpc, protocol,
                                           artifacts, learner_cfg,
                                           seed=child_seed(seed, "sweep", dpc))
        runs = protocol.total_runs if method == "herding" else None
        scores, failed = evaluate_datasets(datasets, task.test, protocol,
                                           learner_cfg,
                                           seed=child_seed(seed, "sweep-eval", dpc),
                                           workers=workers, runs_per_dataset=runs)
        reports.append(EvalReport(method, learner_cfg.arch, dpc, scores, failed))
    if csv_path is not None:
        write_sweep_csv(reports, csv_path)
    if svg_path is not None:
        write_sweep_svg(reports, svg_path)
    return reports


def ablation(task, protocol, distill_cfg, pretrained_gen, learner_cfg, dpc, seed,
             workers=1, oversample=100):
    """Four rows: the full method plus one run each with the representative
    teacher, diverse mini-batch sampling, or final selection disabled."""
    variants = [
        ("full", {}, True),
        ("no_rt", {"use_representative_teacher": False}, True),
        ("no_dms", {"use_diverse_minibatch": False}, True),
        ("no_selection", {}, False),
    ]
    extractor = train_feature_extractor(task.train, learner_cfg,
                                        seed=child_seed(seed, "features"))
    reports = []
    for name, overrides, use_selection in variants:
        gen = pretrained_gen.clone()
        cfg = replace(distill_cfg, **overrides)
        run_distillation(cfg, task.train, gen, learner_cfg,
                         feature_fn=extractor.features_np)
        datasets = []
        for i in range(protocol.datasets_per_method):
            dd = generate_distilled(gen, extractor.features_np, dpc,
                                    oversample=oversample if use_selection else 1,
                                    top_p=distill_cfg.top_p,
                                    max_len=distill_cfg.max_gen_len,
                                    seed=child_seed(seed, name, i),
                                    allow_sep=task.is_pair,
                                    use_selection=use_selection)
            datasets.append(dd.to_labeled(task.train.vocab))
        scores, failed = evaluate_datasets(datasets, task.test, protocol,
                                           learner_cfg,
                                           seed=child_seed(seed, "eval", name),
                                           workers=workers)
        reports.append(EvalReport(name, learner_cfg.arch, dpc, scores, failed))
    base = reports[0]
    for report in reports:
        report.baseline = "full"
        report.p_value = welch_t_test(report.scores, base.scores).p
    return reports


def cross_model(task, datasets, protocol, learner_cfgs, seed, dpc, method="dilm",
                workers=1):
    """Evaluate the same candidate datasets under multiple learner
    architectures; one report per architecture."""
    reports = []
    for cfg in learner_cfgs:
        scores, failed = evaluate_datasets(datasets, task.test, protocol, cfg,
                                           seed=child_seed(seed, "xmodel", cfg.arch),
                                           workers=workers)
        reports.append(EvalReport(method, cfg.arch, dpc, scores, failed))
    return reports


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------


def write_reports_csv(reports, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "method", "arch", "dpc", "run", "score",
                         "mean", "std", "p_value", "baseline", "failed_runs"])
        for r in reports:
            for i, s in enumerate(r.scores):
                writer.writerow(["run", r.method, r.arch, r.dpc, i, repr(s),
                                 "", "", "", "", ""])
        for r in reports:
            writer.writerow(["summary", r.method, r.arch, r.dpc, "", "",
                             repr(r.mean), repr(r.std),
                             "" if r.p_value is None else repr(r.p_value),
                             r.baseline or "", r.failed_runs])


def load_reports_csv(path):
    reports = {}
    order = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            key = (row["method"], row["arch"], int(row["dpc"]))
            if key not in reports:
                reports[key] = EvalReport(row["method"], row["arch"],
                                          int(row["dpc"]), [])
                order.append(key)
            r = reports[key]
            if row["kind"] == "run":
                r.scores.append(float(row["score"]))
            else:
                r.baseline = row["baseline"] or None
                r.p_value = float(row["p_value"]) if row["p_value"] else None
                r.failed_runs = int(row["failed_runs"])
    return [reports[k] for k in order]


def reports_markdown(reports, title="Evaluation"):
    """Mean +/- std per method, '*' marking p < 0.05 against the baseline."""
    lines = [f"## {title}", ""]
    base = next((r.baseline for r in reports if r.baseline), None)
    if base:
        lines.append(f"`*` = p < 0.05 (Welch's t-test) vs `{base}`.")
        lines.append("")
    lines.append("| method | arch | dpc | score (mean±std) | runs | failed |")
    lines.append("|---|---|---|---|---|---|")
    for r in reports:
        star = "*" if (r.p_value is not None and r.p_value < 0.05
                       and r.method != r.baseline) else ""
        lines.append(f"| {r.method} | {r.arch} | {r.dpc} | "
                     f"{100 * r.mean:.1f}±{100 * r.std:.1f}{star} | "
                     f"{len(r.scores)} | {r.failed_runs} |")
    return "\n".join(lines) + "\n"


def write_reports_markdown(reports, path, title="Evaluation"):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(reports_markdown(reports, title))


def write_sweep_csv(reports, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dpc", "mean", "std", "ci95_lo", "ci95_hi", "runs",
                         "failed_runs"])
        for r in reports:
            half = 1.96 * r.std / np.sqrt(len(r.scores)) if r.scores else 0.0
            writer.writerow([r.dpc, repr(r.mean), repr(r.std),
                             repr(r.mean - half), repr(r.mean + half),
                             len(r.scores), r.failed_runs])


def write_sweep_svg(reports, path, title="samples per class vs score"):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    dpcs = [r.dpc for r in reports]
    means = np.array([r.mean for r in reports])
    halves = np.array([1.96 * r.std / np.sqrt(len(r.scores)) if r.scores else 0.0
                       for r in reports])
    fig, axis = plt.subplots(figsize=(5, 3.2))
    axis.plot(dpcs, means, marker="o", label=reports[0].method if reports else "")
    axis.fill_between(dpcs, means - halves, means + halves, alpha=0.25,
                      label="95% CI")
    axis.set_xlabel("samples per class")
    axis.set_ylabel("score")
    axis.set_title(title)
    axis.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
