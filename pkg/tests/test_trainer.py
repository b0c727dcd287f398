import math

import numpy as np
import pytest

from carmmi import data, losses, trainer
from carmmi.tensor import Tensor
from carmmi.trainer import (AdamState, GradientNanError, TrainConfig, Trainer,
                            adam_step, clip_global_norm, lr_at)


def small_corpus(seed=0):
    cfg = data.SynthCorpusConfig(alphabet_size=5, duration_min=2, duration_max=3,
                                 d_mel=4, d_lin=3, noise_std=0.3,
                                 utt_len_min=2, utt_len_max=3, corpus_size=24,
                                 validation_fraction=1.0 / 8.0, seed=seed)
    return data.generate_corpus(cfg)


def small_trainer(tmp=None, seed=0, lam=1.0, build_recognizer=True, **kw):
    tcfg = dict(max_steps=4, eval_every=2, checkpoint_every=100, seed=seed,
                embed_dim=6, enc_hidden=8, dec_hidden=8, rec_hidden=8,
                attn_dim=4, attn_filters=3, attn_kernel=3, prenet_dim=4,
                conv_kernel=3)
    tcfg.update(kw)
    return Trainer(small_corpus(), data.PipelineConfig(batch_size=4),
                   TrainConfig(**tcfg), losses.LossConfig(lambda_ctc=lam),
                   out_dir=str(tmp) if tmp else None,
                   build_recognizer=build_recognizer)


# -- learning rate schedule -------------------------------------------------

def test_lr_schedule_values():
    assert lr_at(1) == 0.002
    assert lr_at(4000) == 0.002
    assert abs(lr_at(16000) - 0.001) < 1e-15
    assert abs(lr_at(1000) - 0.002) < 1e-15     # still in warmup plateau


def test_lr_rejects_step_zero():
    with pytest.raises(ValueError):
        lr_at(0)


# -- clipping ---------------------------------------------------------------

def test_clip_scales_to_unit_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = clip_global_norm(grads, 1.0)
    assert norm == 5.0
    np.testing.assert_allclose(clipped["a"], [0.6])
    np.testing.assert_allclose(clipped["b"], [0.8])


def test_clip_leaves_small_gradients_alone():
    grads = {"a": np.array([0.3, 0.4])}
    clipped, norm = clip_global_norm(grads, 1.0)
    assert norm == 0.5
    assert clipped["a"] is grads["a"]


def test_clip_names_nan_tensor():
    with pytest.raises(GradientNanError, match="bad_tensor"):
        clip_global_norm({"ok": np.ones(2), "bad_tensor": np.array([np.nan])}, 1.0)


# -- Adam -------------------------------------------------------------------

def test_adam_matches_independent_scalar_oracle():
    # plain-float reimplementation of bias-corrected Adam on d/dw (w-3)^2
    w = 0.5
    m = v = 0.0
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    trace = []
    for t in range(1, 101):
        g = 2.0 * (w - 3.0)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        trace.append(w)

    p = Tensor(np.array([0.5]), requires_grad=True)
    params = {"w": p}
    state = AdamState(params)
    for t in range(1, 101):
        g = np.array([2.0 * (p.values[0] - 3.0)])
        adam_step(params, {"w": g}, state, t, lr, b1, b2, eps)
        assert abs(p.values[0] - trace[t - 1]) < 1e-12, t


def test_adam_converges_on_quadratic():
    p = Tensor(np.array([5.0, -5.0]), requires_grad=True)
    params = {"w": p}
    state = AdamState(params)
    for t in range(1, 2001):
        adam_step(params, {"w": 2.0 * p.values}, state, t, 0.05)
    assert np.abs(p.values).max() < 1e-3


# -- the loop ---------------------------------------------------------------

def test_metric_rows_have_all_columns():
    tr = small_trainer()
    rows = tr.train()
    assert len(rows) == 2
    for row in rows:
        assert list(row) == trainer.METRIC_COLUMNS
        assert row["train_ctc"] != "" and row["mi_lower_bound"] != ""
        assert float(row["grad_norm"]) > 0


def test_same_seed_same_history():
    a = small_trainer(seed=3).train()
    b = small_trainer(seed=3).train()
    assert a == b


def test_lambda_zero_leaves_ctc_columns_empty():
    rows = small_trainer(lam=0.0).train()
    for row in rows:
        assert row["train_ctc"] == ""
        assert row["val_ctc"] == ""
        assert row["mi_lower_bound"] == ""


def test_lambda_zero_matches_recognizer_free_build():
    with_rec = small_trainer(lam=0.0, build_recognizer=True).train()
    without = small_trainer(lam=0.0, build_recognizer=False).train()
    assert with_rec == without


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    tr = small_trainer(max_steps=3, eval_every=100)
    tr.train()
    path = str(tmp_path / "ck")
    tr.save(path)
    model2, adam2, step, rng_state, manifest = trainer.load_checkpoint(path)
    assert step == 3
    for name, t in tr.model.parameters().items():
        assert t.values.tobytes() == model2.parameters()[name].values.tobytes(), name
        assert tr.adam.m[name].tobytes() == adam2.m[name].tobytes()
        assert tr.adam.v[name].tobytes() == adam2.v[name].tobytes()
    assert rng_state == trainer._jsonable_rng(tr.rng.bit_generator.state)


def test_resume_matches_uninterrupted_run(tmp_path):
    full = small_trainer(max_steps=6, eval_every=100)
    full.train()

    first = small_trainer(max_steps=3, eval_every=100)
    first.train()
    path = str(tmp_path / "ck")
    first.save(path)

    resumed = small_trainer(max_steps=6, eval_every=100)
    resumed.restore(path)
    assert resumed.step == 3
    resumed.train()
    for name, t in full.model.parameters().items():
        assert t.values.tobytes() == resumed.model.parameters()[name].values.tobytes(), name


def test_metrics_csv_written(tmp_path):
    tr = small_trainer(tmp=tmp_path)
    tr.train()
    text = (tmp_path / "metrics.csv").read_text().splitlines()
    assert text[0].startswith("# config_hash=")
    assert text[1] == ",".join(trainer.METRIC_COLUMNS)
    assert len(text) == 2 + 2
    assert (tmp_path / "ckpt_last.json").exists()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_aborts():
    tr = small_trainer()
    tr.model.parameters()["dec.mel"].values[0, 0] = np.nan
    with pytest.raises(trainer.NanAbortError):
        tr.train()


def test_reconstruction_gap():
    row = {"val_mel_l1": "0.5", "val_linear_l1": "0.7",
           "train_mel_l1": "0.3", "train_linear_l1": "0.4"}
    assert abs(trainer.reconstruction_gap(row) - 0.5) < 1e-15
