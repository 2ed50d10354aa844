"""Generator pretraining and distilled-dataset production.

Pretraining fits the generator to the encoded corpus with the masked language
modeling loss. Final production oversamples each class, removes exact
duplicates, and keeps the center-most samples in feature space, so one trained
generator yields distilled sets of any size without retraining.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .coreset import random_select, select_centers
from .data import LabeledDataset, encode_for_generator, sample_to_record, write_jsonl
from .models import LearnerModel
from .optim import Optimizer, warmup_cosine
from .seeds import child_seed, rng_for


@dataclass
class DistilledDataset:
    classes: list          # per-class synthetic samples
    dpc: int
    provenance: dict

    def to_labeled(self, vocab):
        return LabeledDataset([list(b) for b in self.classes], vocab).validate()

    def all_samples(self):
        return [s for bucket in self.classes for s in bucket]


def params_fingerprint(params):
    """Short stable id of a parameter set (used as checkpoint provenance)."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = params[name]
        data = arr.data if isinstance(arr, ad.Tensor) else arr
        h.update(name.encode())
        h.update(np.ascontiguousarray(data, dtype="<f8").tobytes())
    return h.hexdigest()[:12]


def pretrain_generator(gen, dataset, steps, lr, batch=64, seed=0,
                       warmup_ratio=0.05, weight_decay=0.01, clip_norm=1.0,
                       max_len=32):
    """Fit the generator to the encoded corpus; returns the per-step loss
    history. Zero steps leaves the parameters untouched."""
    if dataset.size == 0:
        raise ValueError("dataset is empty")
    encoded = [encode_for_generator(s, dataset.vocab, max_len)
               for s in dataset.all_samples()]
    opt = Optimizer(gen.params, "adamw", lr=lr, weight_decay=weight_decay,
                    clip_norm=clip_norm)
    rng = rng_for(seed, "pretrain")
    history = []
    for step in range(steps):
        idx = rng.integers(0, len(encoded), size=min(batch, len(encoded)))
        loss = gen.lm_loss_batch([encoded[int(i)] for i in idx])
        value = loss.item()
        if not np.isfinite(value):
            raise RuntimeError(f"pretraining diverged at step {step}: loss={value}")
        ad.backward(loss)
        opt.step(lr_scale=warmup_cosine(step, steps, warmup_ratio))
        history.append(value)
    return history


def train_feature_extractor(dataset, learner_cfg, seed, steps=200, per_class=64,
                            lr=0.01, batch=32):
    """A deliberately weak feature extractor: a fresh learner briefly trained
    on a random per-class subset. Stands in for a pretrained encoder when
    selections need a feature space."""
    k = min(per_class, dataset.min_class_size())
    sel = random_select(dataset, k, seed=child_seed(seed, "extractor-subset"))
    subset = [s for bucket in sel.samples(dataset) for s in bucket]
    learner = LearnerModel(dataset.vocab, dataset.num_classes, learner_cfg,
                           seed=child_seed(seed, "extractor-init"))
    opt = Optimizer(learner.params, "adamw", lr=lr, weight_decay=0.01,
                    clip_norm=1.0)
    rng = rng_for(seed, "extractor-batches")
    for step in range(steps):
        idx = rng.integers(0, len(subset), size=min(batch, len(subset)))
        ad.backward(learner.loss_node([subset[int(i)] for i in idx]))
        opt.step(lr_scale=warmup_cosine(step, steps, 0.1))
    return learner


def generate_distilled(gen, feature_fn, dpc, oversample=100, top_p=0.95,
                       seed=0, max_len=32, allow_sep=True, use_selection=True,
                       checkpoint_id=None):
    """Oversample each class, de-duplicate, and keep the dpc center-most
    samples per class. With use_selection=False (ablation) exactly dpc samples
    are drawn per class and kept as-is."""
    if dpc < 1:
        raise ValueError("dpc must be >= 1")
    vocab = gen.vocab
    classes = []
    for c in range(vocab.num_classes):
        rng = rng_for(seed, "distilled-gen", c)
        if not use_selection:
            classes.append(gen.sample_batch(c, dpc, top_p=top_p, max_len=max_len,
                                            rng=rng, allow_sep=allow_sep))
            continue
        drawn = gen.sample_batch(c, dpc * oversample, top_p=top_p,
                                 max_len=max_len, rng=rng, allow_sep=allow_sep)
        seen = set()
        distinct = []
        for s in drawn:
            key = (s.tokens, s.pair_split)
            if key not in seen:
                seen.add(key)
                distinct.append(s)
        if len(distinct) < dpc:
            raise ValueError(
                f"class {c}: only {len(distinct)} distinct samples from "
                f"{dpc * oversample} draws; increase the oversample factor")
        if len(distinct) == dpc:
            classes.append(distinct)
            continue
        feats = np.asarray(feature_fn(distinct), dtype=np.float64)
        picks, _ = select_centers(feats, dpc,
                                  seed=child_seed(seed, "distilled-select", c))
        classes.append([distinct[i] for i in sorted(picks)])
    provenance = {"checkpoint_id": checkpoint_id or params_fingerprint(gen.params),
                  "top_p": top_p, "oversample": oversample if use_selection else 1,
                  "selection_seed": seed, "selection": bool(use_selection),
                  "dpc": dpc}
    return DistilledDataset(classes, dpc, provenance)


def write_distilled_jsonl(path, distilled, vocab):
    write_jsonl(path, distilled.all_samples(), vocab, synthetic=True,
                provenance=distilled.provenance)


def write_sample_sheet(path, distilled, vocab):
    """Human-readable listing of the distilled samples, one table per class."""
    lines = ["# Distilled samples", ""]
    prov = distilled.provenance
    lines.append(f"checkpoint `{prov['checkpoint_id']}`, top_p={prov['top_p']}, "
                 f"oversample={prov['oversample']}, "
                 f"selection_seed={prov['selection_seed']}")
    for c, bucket in enumerate(distilled.classes):
        lines += ["", f"## class {c}", ""]
        pair = any(s.pair_split is not None for s in bucket)
        if pair:
            lines.append("| sentence 1 | sentence 2 |")
            lines.append("|---|---|")
        else:
            lines.append("| sentence |")
            lines.append("|---|")
        for s in bucket:
            rec = sample_to_record(s, vocab)
            if pair:
                lines.append(f"| `{rec['text']}` | `{rec.get('text2', '')}` |")
            else:
                lines.append(f"| `{rec['text']}` |")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
