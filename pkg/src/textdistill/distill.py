"""The nested-loop distillation engine.

Per class, the learner's head gradient on a representative real batch is the
matching target; generated samples are weighted by their (softmaxed) sequence
log-probabilities, and the cosine distance between the real gradient and the
weighted synthetic aggregate is pushed down. Generated text itself is not
differentiable, so the generator update is realized as reward-weighted
log-likelihood ascent where each sample's reward is computed in closed form;
``direct_generator_grads`` keeps the pure reverse-mode path alive as an
equivalence oracle for that closed form.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import ZeroNormError
from .coreset import kcenters_select, kmeans
from .data import encode_for_generator
from .models import LearnerModel
from .optim import Optimizer, warmup_cosine
from .seeds import child_seed, rng_for
from .synthesis import train_feature_extractor


class DistillError(RuntimeError):
    """Failure inside the training loop, tagged with loop coordinates."""

    def __init__(self, message, outer=None, inner=None, class_id=None):
        self.outer = outer
        self.inner = inner
        self.class_id = class_id
        coords = f"(outer={outer}, inner={inner}, class={class_id})"
        super().__init__(f"{message} at {coords}")


@dataclass
class DistillConfig:
    outer_steps: int = 2000          # learner re-initializations
    inner_steps: int = 10            # generator updates per outer step
    learner_steps: int = 20          # learner updates per inner step
    real_batch: int = 200            # representative real samples per class
    syn_batch: int = 64              # generated samples per class per step
    gen_interval: int = 200          # steps between pool regenerations
    learner_lr: float = 0.05
    gen_lr: float = 1e-3
    teacher_set_count: int = 10
    top_p: float = 0.95
    length_normalize: bool = False
    max_gen_len: int = 32
    learner_batch: int = 64
    use_representative_teacher: bool = True
    use_diverse_minibatch: bool = True
    warmup_ratio: float = 0.05
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    checkpoint_interval: int = 0
    seed: int = 0

    def validate(self, dataset=None):
        counts = {"outer_steps": self.outer_steps, "inner_steps": self.inner_steps,
                  "real_batch": self.real_batch, "syn_batch": self.syn_batch,
                  "gen_interval": self.gen_interval,
                  "teacher_set_count": self.teacher_set_count}
        for name, v in counts.items():
            if v < 1:
                raise ValueError(f"{name} must be >= 1, got {v}")
        if self.learner_steps < 0:
            raise ValueError("learner_steps must be >= 0")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if dataset is not None and self.real_batch > dataset.min_class_size():
            raise ValueError(f"real_batch {self.real_batch} exceeds smallest "
                             f"class size {dataset.min_class_size()}")
        return self

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# losses and the policy-gradient identity
# ---------------------------------------------------------------------------


def gm_loss(real_grad, syn_grad):
    """Cosine-distance node between a fixed real gradient and a synthetic
    aggregate (graph-linked through whatever produced it)."""
    real_grad = np.asarray(real_grad, dtype=np.float64)
    if np.linalg.norm(real_grad) == 0.0:
        raise ZeroNormError("gradient_matching", "real")
    syn = ad.as_tensor(syn_grad)
    if np.linalg.norm(syn.data) == 0.0:
        raise ZeroNormError("gradient_matching", "synthetic")
    return ad.cosine_distance(ad.Tensor(real_grad), syn)


def weighted_syn_loss(learner, samples, log_probs, lengths=None):
    """Generation-probability-weighted classifier loss.

    log_probs is a (N,) node of sequence log-probabilities; weights are their
    softmax (optionally over length-normalized values when ``lengths`` is
    given). Returns (scalar loss node, weight node).
    """
    log_probs = ad.as_tensor(log_probs)
    if log_probs.ndim != 1 or log_probs.shape[0] != len(samples):
        raise ad.ShapeError("weighted_syn_loss", [log_probs.shape],
                            f"need one log-prob per sample ({len(samples)})")
    scores = log_probs if lengths is None else log_probs * ad.Tensor(
        1.0 / np.asarray(lengths, dtype=np.float64))
    a = ad.softmax(scores)
    losses = learner.per_sample_losses_node(samples)
    return ad.dot(a, losses), a


def policy_gradient_rewards(real_grad, syn_grads, weights):
    """Closed-form per-sample rewards for the generator update.

    With aggregate gbar = sum_n weights_n * g_n and u the derivative of the
    cosine distance D(real, gbar) w.r.t. gbar, reward_n is
    weights_n * (g_n - gbar) . (-u): positive when raising sample n's relative
    probability lowers the matching distance.
    """
    real_grad = np.asarray(real_grad, dtype=np.float64)
    syn_grads = np.asarray(syn_grads, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    gbar = weights @ syn_grads
    na = np.linalg.norm(real_grad)
    nb = np.linalg.norm(gbar)
    if na == 0.0:
        raise ZeroNormError("gradient_matching", "real")
    if nb == 0.0:
        raise ZeroNormError("gradient_matching", "synthetic")
    ab = float(real_grad @ gbar)
    gm_value = 1.0 - ab / (na * nb)
    u = -real_grad / (na * nb) + ab * gbar / (na * nb**3)
    rewards = weights * ((syn_grads - gbar) @ (-u))
    return rewards, gm_value, gbar


def _softmax_np(x):
    e = np.exp(x - x.max())
    return e / e.sum()


def _score_node(gen, samples, cfg):
    """Sequence log-prob node for a synthetic batch, optionally
    length-normalized; also returns predicted-position counts."""
    encoded = [encode_for_generator(s, gen.vocab, cfg.max_gen_len) for s in samples]
    node = gen.sequence_log_prob_batch(encoded)
    lengths = np.array([len(e) - 1 for e in encoded], dtype=np.float64)
    if cfg.length_normalize:
        node = node * ad.Tensor(1.0 / lengths)
    return node, lengths


def _class_diagnostics(rewards, weights, gm_value):
    wpos = weights[weights > 0]
    return {"gm_loss": gm_value,
            "reward_mean": float(rewards.mean()),
            "reward_std": float(rewards.std()),
            "weight_entropy": float(-(wpos * np.log(wpos)).sum())}


def closed_form_generator_backward(gen, learner, real_batches, syn_batches, cfg):
    """Accumulate the class-averaged matching gradient into the generator via
    closed-form rewards; returns per-class diagnostics."""
    num_classes = len(real_batches)
    total = None
    diagnostics = {}
    for c in sorted(real_batches):
        try:
            real = real_batches[c]
            syn = syn_batches[c]
            real_g = learner.head_gradient(real, np.full(len(real), 1.0 / len(real)))
            syn_g = learner.per_sample_head_gradients(syn)
            score, _ = _score_node(gen, syn, cfg)
            weights = _softmax_np(score.data)
            rewards, gm_value, _ = policy_gradient_rewards(real_g, syn_g, weights)
            contrib = ad.dot(ad.Tensor(-rewards / num_classes), score)
            total = contrib if total is None else total + contrib
            diagnostics[c] = _class_diagnostics(rewards, weights, gm_value)
        except DistillError:
            raise
        except Exception as e:
            raise DistillError(str(e), class_id=c) from e
    ad.backward(total)
    return diagnostics


def direct_generator_grads(gen, learner, real_batches, syn_batches, cfg):
    """Reverse-mode differentiation of the full chain (softmax weighting ->
    weighted gradient aggregate -> cosine distance); the oracle the closed
    form must match."""
    ad.zero_grads(gen.params.values())
    num_classes = len(real_batches)
    total = None
    for c in sorted(real_batches):
        real = real_batches[c]
        syn = syn_batches[c]
        real_g = learner.head_gradient(real, np.full(len(real), 1.0 / len(real)))
        syn_g = learner.per_sample_head_gradients(syn)
        score, _ = _score_node(gen, syn, cfg)
        a = ad.softmax(score)
        gbar = ad.matmul(a, ad.Tensor(syn_g))
        lc = gm_loss(real_g, gbar)
        scaled = lc * (1.0 / num_classes)
        total = scaled if total is None else total + scaled
    ad.backward(total)
    grads = {k: p.grad.copy() for k, p in gen.params.items()}
    ad.zero_grads(gen.params.values())
    return grads


def closed_form_generator_grads(gen, learner, real_batches, syn_batches, cfg):
    ad.zero_grads(gen.params.values())
    diagnostics = closed_form_generator_backward(gen, learner, real_batches,
                                                 syn_batches, cfg)
    grads = {k: p.grad.copy() for k, p in gen.params.items()}
    ad.zero_grads(gen.params.values())
    return grads, diagnostics


def generator_step(gen, learner, real_batches, syn_batches, opt, cfg, lr_scale=1.0):
    """One optimizer step on the generator; returns per-class diagnostics."""
    ad.zero_grads(gen.params.values())
    diagnostics = closed_form_generator_backward(gen, learner, real_batches,
                                                 syn_batches, cfg)
    opt.step(lr_scale=lr_scale)
    return diagnostics


# ---------------------------------------------------------------------------
# representative teacher bank and the generated-sample pool
# ---------------------------------------------------------------------------


@dataclass
class TeacherBank:
    sets: list  # teacher_set_count entries, each a per-class list of batches

    def batch_for_step(self, step):
        return self.sets[step % len(self.sets)]


def build_teacher_bank(dataset, feature_fn, m, count, seed=0):
    """``count`` independent center-based selections of m per class, cycled
    one per training step."""
    sets = []
    for i in range(count):
        sel = kcenters_select(dataset, m, feature_fn, seed=child_seed(seed, "bank", i))
        sets.append(sel.samples(dataset))
    return TeacherBank(sets)


@dataclass
class SynPool:
    num_classes: int
    samples: list = field(default_factory=list)    # per class
    clusters: list = field(default_factory=list)   # per class: list of index lists
    log_probs: list = field(default_factory=list)  # cached at generation time
    refill_count: int = 0

    def __post_init__(self):
        self.samples = [None] * self.num_classes
        self.clusters = [None] * self.num_classes
        self.log_probs = [None] * self.num_classes

    def refill(self, gen, learner, cfg, seed, allow_sep=True):
        pool_size = cfg.syn_batch * cfg.gen_interval
        for c in range(self.num_classes):
            rng = rng_for(seed, "gen", c)
            drawn = gen.sample_batch(c, pool_size, top_p=cfg.top_p,
                                     max_len=cfg.max_gen_len, rng=rng,
                                     allow_sep=allow_sep)
            self.samples[c] = drawn
            encoded = [encode_for_generator(s, gen.vocab, cfg.max_gen_len)
                       for s in drawn]
            self.log_probs[c] = gen.sequence_log_prob_values(encoded)
            if cfg.use_diverse_minibatch:
                feats = learner.features_np(drawn)
                result = kmeans(feats, cfg.syn_batch,
                                seed=child_seed(seed, "pool-cluster", c))
                self.clusters[c] = [np.flatnonzero(result.assignment == j)
                                    for j in range(cfg.syn_batch)]
            else:
                self.clusters[c] = None
        self.refill_count += 1

    def first_n(self, c, n):
        self._check(c)
        return self.samples[c][:n]

    def _check(self, c):
        if self.samples[c] is None:
            raise DistillError("synthetic pool was never filled", class_id=c)


def diverse_minibatch(pool, c, n, rng):
    """One uniformly drawn sample per feature sub-cluster of the pool."""
    pool._check(c)
    if pool.clusters[c] is None or len(pool.clusters[c]) != n:
        raise DistillError(f"pool for class {c} is not clustered into {n} groups",
                           class_id=c)
    picks = []
    for members in pool.clusters[c]:
        picks.append(pool.samples[c][int(members[rng.integers(0, len(members))])])
    return picks


# ---------------------------------------------------------------------------
# the full nested loop
# ---------------------------------------------------------------------------


def _balanced_batch(dataset, size, rng):
    batch = []
    num_classes = dataset.num_classes
    base = size // num_classes
    extra = size % num_classes
    for c, bucket in enumerate(dataset.classes):
        want = base + (1 if c < extra else 0)
        if want <= len(bucket):
            idx = rng.choice(len(bucket), size=want, replace=False)
        else:
            idx = rng.integers(0, len(bucket), size=want)
        batch.extend(bucket[int(i)] for i in idx)
    return batch


def run_distillation(cfg, dataset, gen, learner_cfg, feature_fn=None,
                     log_path=None, checkpoint_dir=None):
    """Full nested-loop training of the generator against the dataset.

    Returns (generator, log rows). The generator must already model the data
    distribution (see synthesis.pretrain_generator).
    """
    from .models import save_generator  # local import to avoid cycle at module load

    cfg.validate(dataset)
    vocab = dataset.vocab
    num_classes = dataset.num_classes
    allow_sep = any(s.pair_split is not None for s in dataset.all_samples())
    total_steps = cfg.outer_steps * cfg.inner_steps

    if feature_fn is None:
        extractor = train_feature_extractor(
            dataset, learner_cfg, seed=child_seed(cfg.seed, "bank-features"))
        feature_fn = extractor.features_np

    bank = None
    if cfg.use_representative_teacher:
        bank = build_teacher_bank(dataset, feature_fn, cfg.real_batch,
                                  cfg.teacher_set_count,
                                  seed=child_seed(cfg.seed, "teacher-bank"))

    gen_opt = Optimizer(gen.params, "adamw", lr=cfg.gen_lr,
                        weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)
    pool = SynPool(num_classes)
    log_rows = []
    step = 0
    for outer in range(1, cfg.outer_steps + 1):
        learner = LearnerModel(vocab, num_classes, learner_cfg,
                               seed=child_seed(cfg.seed, "learner-init", outer))
        learner_opt = Optimizer(learner.params, "sgd", lr=cfg.learner_lr)
        for inner in range(1, cfg.inner_steps + 1):
            try:
                if step % cfg.gen_interval == 0:
                    pool.refill(gen, learner, cfg,
                                seed=child_seed(cfg.seed, "pool", step),
                                allow_sep=allow_sep)
                if bank is not None:
                    real_sets = bank.batch_for_step(step)
                    real_batches = {c: real_sets[c] for c in range(num_classes)}
                else:
                    real_batches = {}
                    for c, bucket in enumerate(dataset.classes):
                        rng = rng_for(cfg.seed, "teacher-random", step, c)
                        idx = rng.choice(len(bucket), size=cfg.real_batch,
                                         replace=False)
                        real_batches[c] = [bucket[int(i)] for i in idx]
                if cfg.use_diverse_minibatch:
                    rng = rng_for(cfg.seed, "syn-draw", step)
                    syn_batches = {c: diverse_minibatch(pool, c, cfg.syn_batch, rng)
                                   for c in range(num_classes)}
                else:
                    syn_batches = {c: pool.first_n(c, cfg.syn_batch)
                                   for c in range(num_classes)}
                diag = generator_step(gen, learner, real_batches, syn_batches,
                                      gen_opt, cfg,
                                      lr_scale=warmup_cosine(step, total_steps,
                                                             cfg.warmup_ratio))
                for k in range(cfg.learner_steps):
                    rng = rng_for(cfg.seed, "inner-batch", step, k)
                    batch = _balanced_batch(dataset,
                                            min(cfg.learner_batch, dataset.size), rng)
                    ad.backward(learner.loss_node(batch))
                    learner_opt.step()
                for c in sorted(diag):
                    log_rows.append({"step": step, "class": c, **diag[c]})
            except DistillError as e:
                raise DistillError(str(e.args[0]).split(" at (outer")[0],
                                   outer=outer, inner=inner,
                                   class_id=e.class_id) from e
            except Exception as e:
                raise DistillError(str(e), outer=outer, inner=inner) from e
            step += 1
            if (checkpoint_dir is not None and cfg.checkpoint_interval > 0
                    and step % cfg.checkpoint_interval == 0):
                save_generator(f"{checkpoint_dir}/generator-step{step:06d}.ckpt", gen)
    if log_path is not None:
        write_training_log(log_rows, log_path)
    return gen, log_rows


def write_training_log(rows, path):
    fields = ["step", "class", "gm_loss", "reward_mean", "reward_std",
              "weight_entropy"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in fields})
