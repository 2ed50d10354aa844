import json

import numpy as np
import pytest

from textdistill.data import (DataSchema, LabeledDataset, Sample, Vocab,
                              load_jsonl, make_synthetic_task)
from textdistill.models import GeneratorConfig, GeneratorModel
from textdistill.seeds import rng_for
from textdistill.synthesis import (generate_distilled, params_fingerprint,
                                   pretrain_generator, train_feature_extractor,
                                   write_distilled_jsonl, write_sample_sheet)
from textdistill.models import LearnerConfig


def _toy_corpus():
    vocab = Vocab(tuple("abcd"), num_classes=4)
    texts = [("abca", 0), ("bbcd", 1), ("cddc", 2), ("dacb", 3)]
    classes = [[] for _ in range(4)]
    for t, lab in texts:
        classes[lab].append(Sample(tuple(vocab.token_to_id[ch] for ch in t), lab))
    return LabeledDataset(classes, vocab)


def test_pretraining_overfits_a_four_sentence_corpus():
    ds = _toy_corpus()
    gen = GeneratorModel(ds.vocab, GeneratorConfig(16, 24), seed=0)
    history = pretrain_generator(gen, ds, steps=800, lr=0.02, batch=4, seed=1)
    assert history[-1] < 0.05  # nats per token


def test_pretrained_model_reproduces_class_conditional_distribution():
    # class 0 text is always "a", class 1 always "b"; enumerate next-token
    # probabilities after each BOS
    vocab = Vocab(tuple("ab"), num_classes=2)
    ds = LabeledDataset([[Sample((0,), 0)], [Sample((1,), 1)]], vocab)
    gen = GeneratorModel(vocab, GeneratorConfig(8, 12), seed=0)
    pretrain_generator(gen, ds, steps=400, lr=0.02, batch=2, seed=1)
    h = np.zeros((1, gen.cfg.hidden_dim))
    _, p0 = gen.next_token_probs_np(h, [vocab.bos_id(0)])
    _, p1 = gen.next_token_probs_np(h, [vocab.bos_id(1)])
    assert p0[0, 0] > 0.99
    assert p1[0, 1] > 0.99


def test_zero_pretraining_steps_leaves_parameters_unchanged():
    ds = _toy_corpus()
    gen = GeneratorModel(ds.vocab, GeneratorConfig(8, 10), seed=3)
    before = {k: v.copy() for k, v in gen.param_arrays().items()}
    history = pretrain_generator(gen, ds, steps=0, lr=0.1, seed=0)
    assert history == []
    for k in before:
        assert np.array_equal(before[k], gen.param_arrays()[k])


def test_pretraining_aborts_on_divergence():
    ds = _toy_corpus()
    gen = GeneratorModel(ds.vocab, GeneratorConfig(8, 10), seed=3)
    gen.params["wo"].data[0, 0] = np.nan
    with pytest.raises(RuntimeError, match="diverged"):
        pretrain_generator(gen, ds, steps=5, lr=0.01, seed=0)


def test_feature_extractor_is_deterministic():
    ds = make_synthetic_task("keyword", 30, seed=40)
    cfg = LearnerConfig("arch-A", 8, 8)
    a = train_feature_extractor(ds, cfg, seed=5, steps=40)
    b = train_feature_extractor(ds, cfg, seed=5, steps=40)
    for k in a.params:
        assert np.array_equal(a.params[k].data, b.params[k].data)


# ---------------------------------------------------------------------------
# distilled dataset production
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained():
    ds = make_synthetic_task("keyword", 60, seed=41, n_letters=12,
                             triggers_per_class=2)
    gen = GeneratorModel(ds.vocab, GeneratorConfig(12, 16), seed=2)
    pretrain_generator(gen, ds, steps=300, lr=0.01, batch=16, seed=3)
    extractor = train_feature_extractor(ds, LearnerConfig("arch-A", 8, 8),
                                        seed=6, steps=60)
    return ds, gen, extractor


def test_generate_distilled_counts_labels_and_validity(trained):
    ds, gen, extractor = trained
    dd = generate_distilled(gen, extractor.features_np, dpc=3, oversample=20,
                            seed=7, max_len=12, allow_sep=False)
    labeled = dd.to_labeled(ds.vocab)
    assert [len(b) for b in labeled.classes] == [3, 3]
    for c, bucket in enumerate(dd.classes):
        for s in bucket:
            assert s.label == c
            assert all(t < ds.vocab.content_size for t in s.tokens)
    # de-duplication: no repeats within a class
    for bucket in dd.classes:
        keys = [(s.tokens, s.pair_split) for s in bucket]
        assert len(set(keys)) == len(keys)


def test_generate_distilled_is_reproducible_and_subset_of_pool(trained):
    ds, gen, extractor = trained
    a = generate_distilled(gen, extractor.features_np, dpc=3, oversample=20,
                           seed=8, max_len=12, allow_sep=False)
    b = generate_distilled(gen, extractor.features_np, dpc=3, oversample=20,
                           seed=8, max_len=12, allow_sep=False)
    assert [s.tokens for bucket in a.classes for s in bucket] == \
        [s.tokens for bucket in b.classes for s in bucket]
    for c in range(2):
        pool = gen.sample_batch(c, 3 * 20, top_p=0.95, max_len=12,
                                rng=rng_for(8, "distilled-gen", c),
                                allow_sep=False)
        pool_keys = {(s.tokens, s.pair_split) for s in pool}
        assert all((s.tokens, s.pair_split) in pool_keys for s in a.classes[c])


def test_generate_distilled_oversample_one_is_identity(trained):
    ds, gen, extractor = trained
    dd = generate_distilled(gen, extractor.features_np, dpc=4, oversample=1,
                            seed=9, max_len=12, allow_sep=False)
    for c in range(2):
        drawn = gen.sample_batch(c, 4, top_p=0.95, max_len=12,
                                 rng=rng_for(9, "distilled-gen", c),
                                 allow_sep=False)
        assert [s.tokens for s in dd.classes[c]] == [s.tokens for s in drawn]


def test_degenerate_generator_raises_helpful_error(trained):
    ds, _, extractor = trained
    gen = GeneratorModel(ds.vocab, GeneratorConfig(8, 10), seed=0)
    for name, p in gen.params.items():
        p.data[...] = 0.0
    gen.params["bo"].data[...] = -1e9
    gen.params["bo"].data[0] = 0.0  # always emits token 0 until max_len
    with pytest.raises(ValueError, match="oversample"):
        generate_distilled(gen, extractor.features_np, dpc=2, oversample=10,
                           seed=10, max_len=6, allow_sep=False)


def test_many_dpc_sizes_from_one_generator_without_retraining(trained):
    ds, gen, extractor = trained
    fingerprint = params_fingerprint(gen.params)
    for dpc in (1, 2, 5, 8):
        dd = generate_distilled(gen, extractor.features_np, dpc=dpc,
                                oversample=25, seed=11, max_len=12,
                                allow_sep=False)
        assert all(len(b) == dpc for b in dd.classes)
    assert params_fingerprint(gen.params) == fingerprint


def test_distilled_jsonl_roundtrip_and_sample_sheet(tmp_path, trained):
    ds, gen, extractor = trained
    dd = generate_distilled(gen, extractor.features_np, dpc=3, oversample=20,
                            seed=12, max_len=12, allow_sep=False,
                            checkpoint_id="abc123")
    path = tmp_path / "distilled.jsonl"
    write_distilled_jsonl(path, dd, ds.vocab)
    lines = path.read_text().splitlines()
    header = json.loads(lines[0])
    assert header["_provenance"]["checkpoint_id"] == "abc123"
    assert header["_provenance"]["oversample"] == 20
    assert all(json.loads(ln)["synthetic"] is True for ln in lines[1:])
    back = load_jsonl(path, DataSchema(num_classes=2, vocab=ds.vocab))
    assert back.size == 6
    sheet = tmp_path / "sheet.md"
    write_sample_sheet(sheet, dd, ds.vocab)
    text = sheet.read_text()
    assert "## class 0" in text and "## class 1" in text


def test_ablated_selection_takes_first_dpc_samples(trained):
    ds, gen, extractor = trained
    dd = generate_distilled(gen, extractor.features_np, dpc=3, oversample=50,
                            seed=13, max_len=12, allow_sep=False,
                            use_selection=False)
    assert dd.provenance["oversample"] == 1
    assert dd.provenance["selection"] is False
    for c in range(2):
        drawn = gen.sample_batch(c, 3, top_p=0.95, max_len=12,
                                 rng=rng_for(13, "distilled-gen", c),
                                 allow_sep=False)
        assert [s.tokens for s in dd.classes[c]] == [s.tokens for s in drawn]
