"""The two tiny models the pipeline trains.

GeneratorModel: a class-conditional causal sequence model (embedding -> one
GRU layer -> vocab projection). It exposes the masked per-token language
modeling loss, unnormalized sequence log-probabilities (graph-linked for the
distillation update), and nucleus sampling.

LearnerModel: a classifier in two architectures. "arch-A" mean-pools token
embeddings (order-invariant); "arch-B" runs a small recurrent encoder and
reads out the last position, so it is order-sensitive. Both end in a linear
head (C x hidden weight, C bias) whose flattened gradient is what gradient
matching consumes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .data import Sample, Vocab, decode_generated, encode_for_generator


@dataclass
class GeneratorConfig:
    embed_dim: int = 32
    hidden_dim: int = 48

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in ("embed_dim", "hidden_dim") if k in d})


def _gauss(rng, shape, std):
    return rng.normal(0.0, std, size=shape)


class GeneratorModel:
    def __init__(self, vocab: Vocab, cfg: GeneratorConfig = None, seed: int = 0):
        self.vocab = vocab
        self.cfg = cfg or GeneratorConfig()
        self.seed = seed
        rng = np.random.default_rng(seed)
        e, h, v = self.cfg.embed_dim, self.cfg.hidden_dim, vocab.size
        init = {
            "emb": _gauss(rng, (v, e), 0.5),
            "wxz": _gauss(rng, (e, h), 1.0 / np.sqrt(e)),
            "whz": _gauss(rng, (h, h), 1.0 / np.sqrt(h)),
            "bz": np.zeros(h),
            "wxr": _gauss(rng, (e, h), 1.0 / np.sqrt(e)),
            "whr": _gauss(rng, (h, h), 1.0 / np.sqrt(h)),
            "br": np.zeros(h),
            "wxn": _gauss(rng, (e, h), 1.0 / np.sqrt(e)),
            "whn": _gauss(rng, (h, h), 1.0 / np.sqrt(h)),
            "bn": np.zeros(h),
            "wo": _gauss(rng, (h, v), 1.0 / np.sqrt(h)),
            "bo": np.zeros(v),
        }
        self.params = {k: ad.Tensor(a, requires_grad=True) for k, a in init.items()}

    # -- parameter plumbing --------------------------------------------------

    def param_arrays(self):
        return {k: p.data for k, p in self.params.items()}

    def set_param_arrays(self, arrays):
        for k, p in self.params.items():
            p.data[...] = arrays[k]

    def clone(self):
        g = GeneratorModel(self.vocab, self.cfg, self.seed)
        g.set_param_arrays({k: v.copy() for k, v in self.param_arrays().items()})
        return g

    # -- forward (tape) -------------------------------------------------------

    def _cell(self, x, h):
        p = self.params
        z = ad.sigmoid(x @ p["wxz"] + h @ p["whz"] + p["bz"])
        r = ad.sigmoid(x @ p["wxr"] + h @ p["whr"] + p["br"])
        n = ad.tanh(x @ p["wxn"] + ad.mul(r, h) @ p["whn"] + p["bn"])
        return (1.0 - z) * n + z * h

    def _pad_batch(self, encoded):
        if not encoded:
            raise ValueError("empty batch of sequences")
        for seq in encoded:
            if len(seq) < 2:
                raise ValueError("sequence length must be >= 2 (one predicted token)")
        t = max(len(s) for s in encoded)
        ids = np.full((len(encoded), t), self.vocab.pad_id, dtype=np.int64)
        for i, seq in enumerate(encoded):
            ids[i, :len(seq)] = seq
        return ids

    def _token_log_prob_sums(self, encoded):
        """Tensor (B,) of per-sequence sums of log p(w_t | w_<t); PAD masked."""
        ids = self._pad_batch(encoded)
        b, t = ids.shape
        inputs, targets = ids[:, :-1], ids[:, 1:]
        mask = (targets != self.vocab.pad_id).astype(np.float64)
        h = ad.Tensor(np.zeros((b, self.cfg.hidden_dim)))
        total = ad.Tensor(np.zeros(b))
        p = self.params
        for step in range(t - 1):
            x = ad.gather_rows(p["emb"], inputs[:, step])
            h = self._cell(x, h)
            lp = ad.log_softmax(h @ p["wo"] + p["bo"])
            picked = ad.take_per_row(lp, targets[:, step])
            total = total + picked * ad.Tensor(mask[:, step])
        lengths = mask.sum(axis=1)
        return total, lengths

    def lm_loss_batch(self, encoded):
        """Scalar node: batch mean of per-sequence mean negative log-likelihood."""
        total, lengths = self._token_log_prob_sums(encoded)
        per_sample = total * ad.Tensor(1.0 / lengths)
        return ad.neg(ad.reduce_mean(per_sample))

    def lm_loss(self, encoded):
        return self.lm_loss_batch([encoded])

    def sequence_log_prob_batch(self, encoded):
        """Tensor (B,) of unnormalized sequence log-probabilities."""
        total, _ = self._token_log_prob_sums(encoded)
        return total

    def sequence_log_prob(self, encoded):
        return ad.reduce_sum(self.sequence_log_prob_batch([encoded]))

    def sequence_log_prob_values(self, encoded):
        """Tape-free counterpart of sequence_log_prob_batch (plain ndarray)."""
        ids = self._pad_batch(encoded)
        b, t = ids.shape
        inputs, targets = ids[:, :-1], ids[:, 1:]
        mask = (targets != self.vocab.pad_id).astype(np.float64)
        p = self.param_arrays()
        h = np.zeros((b, self.cfg.hidden_dim))
        total = np.zeros(b)
        for step in range(t - 1):
            x = p["emb"][inputs[:, step]]
            h = self._cell_np(x, h)
            logits = h @ p["wo"] + p["bo"]
            m = logits.max(axis=1, keepdims=True)
            lp = logits - (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))
            total += lp[np.arange(b), targets[:, step]] * mask[:, step]
        return total

    # -- forward (plain numpy, used by sampling) -------------------------------

    def _cell_np(self, x, h):
        p = self.param_arrays()

        def sig(v):
            return 1.0 / (1.0 + np.exp(-np.clip(v, -60.0, 60.0)))

        z = sig(x @ p["wxz"] + h @ p["whz"] + p["bz"])
        r = sig(x @ p["wxr"] + h @ p["whr"] + p["br"])
        n = np.tanh(x @ p["wxn"] + (r * h) @ p["whn"] + p["bn"])
        return (1.0 - z) * n + z * h

    def next_token_probs_np(self, h, token_ids):
        """Advance hidden state h (B x H) by token_ids (B,); return (h', probs)."""
        p = self.param_arrays()
        x = p["emb"][np.asarray(token_ids, dtype=np.int64)]
        h = self._cell_np(x, h)
        logits = h @ p["wo"] + p["bo"]
        m = logits.max(axis=1, keepdims=True)
        e = np.exp(logits - m)
        return h, e / e.sum(axis=1, keepdims=True)

    def sample_batch(self, class_id, n, top_p=0.95, max_len=32, rng=None,
                     allow_sep=True):
        """Draw n sequences conditioned on <bos_class>; nucleus sampling with
        threshold top_p; a row stops at <eos> or after max_len emitted tokens.

        PAD and the class-BOS tokens are never emitted; <sep> is only allowed
        once per sequence and never first (and not at all when allow_sep is
        False).
        """
        if not 0.0 < top_p <= 1.0:
            raise ValueError(f"top_p must be in (0, 1], got {top_p}")
        vocab = self.vocab
        if rng is None:
            rng = np.random.default_rng(0)
        always_banned = [vocab.pad_id] + list(vocab.bos_ids)
        h = np.zeros((n, self.cfg.hidden_dim))
        cur = np.full(n, vocab.bos_id(class_id), dtype=np.int64)
        emitted = [[] for _ in range(n)]
        alive = np.ones(n, dtype=bool)
        seen_sep = np.zeros(n, dtype=bool)
        for pos in range(max_len):
            h, probs = self.next_token_probs_np(h, cur)
            probs[:, always_banned] = 0.0
            sep_banned = ~alive | seen_sep | (pos == 0) if allow_sep else np.ones(n, bool)
            probs[sep_banned, vocab.sep_id] = 0.0
            probs /= probs.sum(axis=1, keepdims=True)
            probs = nucleus_filter(probs, top_p)
            u = rng.random(n)
            cdf = np.cumsum(probs, axis=1)
            chosen = (u[:, None] < cdf).argmax(axis=1)
            cur = np.where(alive, chosen, vocab.pad_id)
            for i in range(n):
                if alive[i]:
                    if chosen[i] == vocab.eos_id:
                        alive[i] = False
                    else:
                        emitted[i].append(int(chosen[i]))
                        if chosen[i] == vocab.sep_id:
                            seen_sep[i] = True
            if not alive.any():
                break
        return [decode_generated(seq, vocab, class_id) for seq in emitted]

    def sample(self, class_id, top_p=0.95, max_len=32, rng=None, allow_sep=True):
        return self.sample_batch(class_id, 1, top_p, max_len, rng, allow_sep)[0]


def nucleus_filter(probs, top_p):
    """Keep the smallest probability-sorted prefix with cumulative mass
    >= top_p, renormalized. Accepts one distribution or a batch of rows."""
    single = probs.ndim == 1
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    order = np.argsort(-p, axis=1, kind="stable")
    sorted_p = np.take_along_axis(p, order, axis=1)
    csum = np.cumsum(sorted_p, axis=1)
    keep_sorted = (csum - sorted_p) < top_p  # mass before this token still < p
    keep = np.zeros_like(p, dtype=bool)
    np.put_along_axis(keep, order, keep_sorted, axis=1)
    out = np.where(keep, p, 0.0)
    out /= out.sum(axis=1, keepdims=True)
    return out[0] if single else out


def save_generator(path, gen):
    """Checkpoint the parameter blob plus a JSON sidecar describing vocab and
    architecture, so the model is reloadable on its own."""
    ad.save_checkpoint(path, gen.params)
    meta = {"vocab": gen.vocab.to_dict(), "config": asdict(gen.cfg), "seed": gen.seed}
    with open(str(path) + ".meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1)


def load_generator(path):
    with open(str(path) + ".meta.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    gen = GeneratorModel(Vocab.from_dict(meta["vocab"]),
                         GeneratorConfig.from_dict(meta["config"]),
                         seed=meta.get("seed", 0))
    gen.set_param_arrays(ad.load_checkpoint(path))
    return gen


# ---------------------------------------------------------------------------
# learner
# ---------------------------------------------------------------------------


@dataclass
class LearnerConfig:
    arch: str = "arch-A"  # "arch-B" = recurrent encoder, last-position readout
    embed_dim: int = 24
    hidden_dim: int = 24

    def __post_init__(self):
        if self.arch not in ("arch-A", "arch-B"):
            raise ValueError(f"unknown learner arch {self.arch!r}")

    @classmethod
    def from_dict(cls, d):
        keys = ("arch", "embed_dim", "hidden_dim")
        return cls(**{k: d[k] for k in keys if k in d})


class LearnerModel:
    def __init__(self, vocab: Vocab, num_classes: int, cfg: LearnerConfig = None,
                 seed: int = 0):
        self.vocab = vocab
        self.num_classes = num_classes
        self.cfg = cfg or LearnerConfig()
        self.seed = seed
        rng = np.random.default_rng(seed)
        e, h, v, c = self.cfg.embed_dim, self.cfg.hidden_dim, vocab.size, num_classes
        init = {"emb": _gauss(rng, (v, e), 0.5),
                "w1": _gauss(rng, (e, h), 1.0 / np.sqrt(e))}
        if self.cfg.arch == "arch-B":
            init["u1"] = _gauss(rng, (h, h), 1.0 / np.sqrt(h))
        init["b1"] = np.zeros(h)
        init["head_w"] = _gauss(rng, (c, h), 1.0 / np.sqrt(h))
        init["head_b"] = np.zeros(c)
        self.params = {k: ad.Tensor(a, requires_grad=True) for k, a in init.items()}

    @property
    def head_gradient_dim(self):
        return self.num_classes * self.cfg.hidden_dim + self.num_classes

    def param_arrays(self):
        return {k: p.data for k, p in self.params.items()}

    def encode(self, sample):
        """Content ids the classifier sees: sentence(s) with <sep> between a
        pair, <eos> appended. Class BOS never appears here."""
        if sample.pair_split is None:
            ids = list(sample.tokens)
        else:
            ids = (list(sample.tokens[:sample.pair_split]) + [self.vocab.sep_id]
                   + list(sample.tokens[sample.pair_split:]))
        return ids + [self.vocab.eos_id]

    def _id_batch(self, samples):
        enc = [self.encode(s) for s in samples]
        t = max(len(x) for x in enc)
        ids = np.full((len(enc), t), self.vocab.pad_id, dtype=np.int64)
        for i, x in enumerate(enc):
            ids[i, :len(x)] = x
        lengths = np.array([len(x) for x in enc], dtype=np.int64)
        return ids, lengths

    def _bow(self, samples):
        """Per-sample token frequencies over the vocab (mean-pool weights)."""
        ids, lengths = self._id_batch(samples)
        bow = np.zeros((len(samples), self.vocab.size))
        rows = np.repeat(np.arange(len(samples)), ids.shape[1])
        np.add.at(bow, (rows, ids.ravel()), 1.0)
        bow[:, self.vocab.pad_id] = 0.0
        return bow / lengths[:, None]

    # -- features ---------------------------------------------------------------

    def features_node(self, samples):
        p = self.params
        if self.cfg.arch == "arch-A":
            pooled = ad.matmul(ad.Tensor(self._bow(samples)), p["emb"])
            return ad.tanh(pooled @ p["w1"] + p["b1"])
        ids, lengths = self._id_batch(samples)
        b, t = ids.shape
        h = ad.Tensor(np.zeros((b, self.cfg.hidden_dim)))
        for step in range(t):
            x = ad.gather_rows(p["emb"], ids[:, step])
            h_new = ad.tanh(x @ p["w1"] + h @ p["u1"] + p["b1"])
            m = ad.Tensor((step < lengths).astype(np.float64)[:, None])
            h = m * h_new + (1.0 - m) * h
        return h

    def features_np(self, samples):
        p = self.param_arrays()
        if self.cfg.arch == "arch-A":
            pooled = self._bow(samples) @ p["emb"]
            return np.tanh(pooled @ p["w1"] + p["b1"])
        ids, lengths = self._id_batch(samples)
        b, t = ids.shape
        h = np.zeros((b, self.cfg.hidden_dim))
        for step in range(t):
            x = p["emb"][ids[:, step]]
            h_new = np.tanh(x @ p["w1"] + h @ p["u1"] + p["b1"])
            m = (step < lengths)[:, None]
            h = np.where(m, h_new, h)
        return h

    # -- losses and gradients -----------------------------------------------------

    def logits_node(self, samples):
        feats = self.features_node(samples)
        return feats @ ad.transpose(self.params["head_w"]) + self.params["head_b"]

    def logits_np(self, samples):
        p = self.param_arrays()
        return self.features_np(samples) @ p["head_w"].T + p["head_b"]

    def loss_node(self, samples):
        """Mean cross-entropy over the batch, differentiable in all parameters."""
        labels = np.array([s.label for s in samples], dtype=np.int64)
        return ad.cross_entropy(self.logits_node(samples), labels)

    def learner_loss(self, sample):
        return self.loss_node([sample])

    def per_sample_losses_node(self, samples):
        labels = np.array([s.label for s in samples], dtype=np.int64)
        lp = ad.log_softmax(self.logits_node(samples))
        return ad.neg(ad.take_per_row(lp, labels))

    def head_gradient(self, samples, weights):
        """Flat gradient of sum_i weights_i * loss(sample_i) over the head
        (W row-major, then b). Closed form; the encoder is treated as fixed."""
        if len(samples) == 0:
            raise ValueError("empty batch")
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (len(samples),):
            raise ValueError("one weight per sample required")
        grads = self.per_sample_head_gradients(samples)
        return weights @ grads

    def per_sample_head_gradients(self, samples):
        """(B x P) matrix; row i is the head gradient of sample i's loss."""
        if len(samples) == 0:
            raise ValueError("empty batch")
        p = self.param_arrays()
        feats = self.features_np(samples)
        logits = feats @ p["head_w"].T + p["head_b"]
        m = logits.max(axis=1, keepdims=True)
        e = np.exp(logits - m)
        probs = e / e.sum(axis=1, keepdims=True)
        labels = np.array([s.label for s in samples], dtype=np.int64)
        d = probs.copy()
        d[np.arange(len(samples)), labels] -= 1.0
        # dW_i = outer(d_i, f_i) flattened row-major, then db_i = d_i
        dw = d[:, :, None] * feats[:, None, :]
        return np.concatenate([dw.reshape(len(samples), -1), d], axis=1)

    def predict(self, samples):
        return self.logits_np(samples).argmax(axis=1)
