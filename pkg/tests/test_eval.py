import numpy as np
import pytest

from carmmi import data, evaluate, trainer
from carmmi.evaluate import (AbResult, ArmResult, OracleUnfitError, UerRecord,
                             UerReport, align_edit_ops, classify_errors,
                             make_test_texts, measure_uer, train_oracle)
from carmmi.model import Model, ModelConfig


def corpus_for(noise=0.0, size=96, seed=0):
    cfg = data.SynthCorpusConfig(alphabet_size=5, duration_min=2, duration_max=3,
                                 d_mel=4, d_lin=3, noise_std=noise,
                                 utt_len_min=2, utt_len_max=3, corpus_size=size,
                                 validation_fraction=1.0 / 8.0, seed=seed)
    return data.generate_corpus(cfg)


@pytest.fixture(scope="module")
def clean_oracle():
    corpus = corpus_for(noise=0.0)
    oracle = train_oracle(corpus, rec_hidden=32, max_steps=2000, check_every=100)
    return corpus, oracle


# -- alignment and taxonomy -------------------------------------------------

def test_align_identical_is_all_matches():
    ops = align_edit_ops([1, 2, 3], [1, 2, 3])
    assert [k for k, _, _ in ops] == ["match"] * 3


def test_align_costs_are_minimal():
    ops = align_edit_ops([1, 2, 3], [1, 3])
    assert sum(1 for k, _, _ in ops if k != "match") == 1


def test_classify_ok():
    assert classify_errors([1, 2, 3], [1, 2, 3], "stop-token") == "ok"


def test_classify_repetition_of_adjacent_token():
    # "abc" decoded as "abbc"
    assert classify_errors([0, 1, 2], [0, 1, 1, 2], "stop-token") == "repetition"


def test_classify_non_adjacent_insertion_is_substitution():
    assert classify_errors([0, 1, 2], [0, 3, 1, 2], "stop-token") == "substitution"


def test_classify_omission():
    assert classify_errors([0, 1, 2], [0, 2], "stop-token") == "omission"


def test_classify_substitution():
    assert classify_errors([0, 1, 2], [0, 4, 2], "stop-token") == "substitution"


def test_non_stop_overrides_everything():
    assert classify_errors([0, 1], [0, 1], "max-frames") == "non-stop"
    assert classify_errors([0, 1], [3], "max-frames") == "non-stop"


def test_every_utterance_gets_exactly_one_class():
    rng = np.random.default_rng(0)
    for _ in range(200):
        ref = list(rng.integers(0, 4, size=rng.integers(1, 5)))
        dec = list(rng.integers(0, 4, size=rng.integers(0, 6)))
        cls = classify_errors(ref, dec, "stop-token")
        assert cls in evaluate.ERROR_CLASSES
        assert (cls == "ok") == (ref == dec)


def test_uer_report_aggregate():
    records = [UerRecord([1], [1], "stop-token", "ok"),
               UerRecord([1], [2], "stop-token", "substitution"),
               UerRecord([1], [1], "max-frames", "non-stop"),
               UerRecord([2], [2], "stop-token", "ok")]
    report = UerReport(records)
    assert report.uer == 0.5
    counts = report.class_counts()
    assert counts["ok"] == 2 and counts["non-stop"] == 1


# -- oracle -----------------------------------------------------------------

def test_oracle_perfect_on_noiseless_corpus(clean_oracle):
    corpus, oracle = clean_oracle
    assert oracle.accuracy == 1.0
    # decoding the ground-truth features of a training utterance is exact
    u = corpus.utterances[0]
    assert oracle.decode_features([u.mel]) == [list(u.tokens)]


def test_oracle_decode_is_deterministic(clean_oracle):
    corpus, oracle = clean_oracle
    mels = [oracle.stats.normalize(u).mel for u in corpus.utterances[:4]]
    assert oracle.decode(mels) == oracle.decode(mels)


def test_oracle_save_load_roundtrip(clean_oracle, tmp_path):
    corpus, oracle = clean_oracle
    path = str(tmp_path / "oracle")
    oracle.save(path)
    loaded = evaluate.OracleRecognizer.load(path)
    assert loaded.accuracy == oracle.accuracy
    mels = [oracle.stats.normalize(u).mel for u in corpus.utterances[:4]]
    assert loaded.decode(mels) == oracle.decode(mels)


def test_oracle_unfit_raises():
    with pytest.raises(OracleUnfitError):
        train_oracle(corpus_for(noise=0.3), rec_hidden=8, max_steps=1,
                     check_every=1)


# -- UER measurement --------------------------------------------------------

def test_untrained_model_has_high_uer(clean_oracle):
    corpus, oracle = clean_oracle
    cfg = ModelConfig(vocab_size=5, d_mel=4, d_lin=3, reduction=2, embed_dim=6,
                      enc_hidden=8, dec_hidden=8, rec_hidden=8, attn_dim=4,
                      attn_filters=3, attn_kernel=3, prenet_dim=4, conv_kernel=3)
    model = Model(cfg, seed=0, build_recognizer=False)
    texts = make_test_texts(corpus, n=10)
    report = measure_uer(model, oracle, texts,
                         evaluate.default_max_frames(corpus.config))
    assert report.uer >= 0.8
    again = measure_uer(model, oracle, texts,
                        evaluate.default_max_frames(corpus.config))
    assert [r.error_class for r in report.records] == \
           [r.error_class for r in again.records]


def test_make_test_texts_held_out():
    corpus = corpus_for(noise=0.2, size=40)
    texts = make_test_texts(corpus, n=30)
    seen = {tuple(u.tokens) for u in corpus.utterances}
    assert len(texts) == 30
    assert len({tuple(t) for t in texts}) == 30
    for t in texts:
        assert tuple(t) not in seen
        assert 2 <= len(t) <= 3
        assert all(0 <= tok < 5 for tok in t)


# -- grid bookkeeping -------------------------------------------------------

def fake_arms(seeds, base=0.3, mmi=0.1):
    arms = []
    for r, d in evaluate.GRID_COLUMNS:
        for s in seeds:
            arms.append(ArmResult("no-mmi", r, d, s, base + 0.01 * s, 0.2))
    for r, d in evaluate.GRID_COLUMNS[:2]:
        for s in seeds:
            arms.append(ArmResult("mmi", r, d, s, mmi + 0.01 * s, 0.1))
    return AbResult(arms=arms, seeds=list(seeds))


def test_grid_shape_matches_reference_table(tmp_path):
    res = fake_arms([0, 1, 2])
    path = res.write_csv(str(tmp_path / "ab.csv"))
    lines = open(path).read().splitlines()
    header = lines[1].split(",")
    assert header == ["objective", "rf2_dfr0.0", "rf2_dfr0.2", "rf5_dfr0.0"]
    mmi_row = lines[3].split(",")
    assert mmi_row[0] == "mmi" and mmi_row[3] == "-"   # no rf5 cell for mmi


def test_paired_diffs_and_wilcoxon():
    res = fake_arms([0, 1, 2])
    diffs = res.paired_diffs()
    assert all(abs(d - 0.2) < 1e-12 for d in diffs)
    stat, p = res.wilcoxon()
    assert p < 0.2          # all diffs positive, small n bounds the p-value
    # identical arms: all-zero differences degrade gracefully
    tie = fake_arms([0, 1, 2], base=0.3, mmi=0.3)
    assert tie.paired_diffs() == [0.0, 0.0, 0.0]
    assert tie.wilcoxon() == (0.0, 1.0)


def test_ab_requires_three_seeds():
    with pytest.raises(ValueError):
        evaluate.ab_compare(None, [0, 1], None, None, None)


# -- distance table ---------------------------------------------------------

def test_ed_table_shape_and_ordering():
    corpus = corpus_for(noise=0.2, size=40)
    rows = evaluate.ed_table_from_corpus(corpus)
    assert len(rows) == 6
    assert [(r, s) for r, s, _ in rows] == [(1, 1), (1, 2.5), (2, 1), (2, 2.5),
                                            (5, 1), (5, 2.5)]


def test_ed_table_constant_features_all_zero():
    feats = [np.ones((12, 3)) for _ in range(4)]
    rows = evaluate.ed_table(feats)
    assert all(ed == 0.0 for _, _, ed in rows)


def test_ed_csv_roundtrip(tmp_path):
    rows = [(1, 1, 0.25), (2, 2.5, 0.5)]
    path = evaluate.write_ed_csv(rows, str(tmp_path / "ed.csv"), "abc", 7)
    lines = open(path).read().splitlines()
    assert lines[0] == "# config_hash=abc seed=7"
    assert lines[1] == "reduction,shift_multiplier,ed"
    assert lines[2] == "1,1,0.250000"
