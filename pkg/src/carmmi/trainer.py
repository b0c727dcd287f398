"""Training loop: Adam with inverse-sqrt decay after warmup, global-norm
gradient clipping, deterministic batching, checkpointing and metric logging.

Checkpoints are a raw little-endian float64 blob (parameters then Adam
moments, in parameter order) plus a JSON manifest holding names, shapes,
offsets, the RNG state and the resolved configs; a reload reproduces the
forward pass and the subsequent training trajectory bit-exactly.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import ctc as ctc_mod
from . import data as data_mod
from . import losses as losses_mod
from .model import Model, ModelConfig

METRIC_COLUMNS = [
    "step", "train_mel_l1", "train_linear_l1", "train_stop_ce", "train_ctc",
    "val_mel_l1", "val_linear_l1", "val_stop_ce", "val_ctc",
    "mi_lower_bound", "lr", "grad_norm",
]


class NanAbortError(RuntimeError):
    """Training hit a non-finite loss; the last good checkpoint is retained."""

    def __init__(self, step, checkpoint_path):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.checkpoint_path = checkpoint_path


class GradientNanError(RuntimeError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient in parameter tensor {name!r}")
        self.parameter = name


@dataclass
class TrainConfig:
    base_lr: float = 0.002
    warm_steps: int = 4000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    max_steps: int = 20000
    checkpoint_every: int = 5000
    eval_every: int = 500
    seed: int = 0
    # model sizes (desk-scale defaults)
    embed_dim: int = 32
    enc_hidden: int = 64
    dec_hidden: int = 128
    rec_hidden: int = 64
    attn_dim: int = 32
    attn_filters: int = 8
    attn_kernel: int = 7
    prenet_dim: int = 32
    prenet_dropout: float = 0.5
    conv_kernel: int = 5
    stop_threshold: float = 0.5
    max_frames: int = 200


def lr_at(step, base_lr=0.002, warm_steps=4000):
    """base_lr up to the warmup boundary, then inverse-sqrt decay."""
    if step < 1:
        raise ValueError("step must be >= 1")
    return base_lr * min(1.0, np.sqrt(warm_steps / step))


def clip_global_norm(grads, max_norm):
    """Scale the whole gradient dict so its global L2 norm is <= max_norm.

    Returns (clipped grads, pre-clip norm). NaN/inf gradients raise,
    naming the offending tensor.
    """
    sq = 0.0
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise GradientNanError(name)
        flat = g.ravel()
        sq += float(np.dot(flat, flat))
    norm = float(np.sqrt(sq))
    if norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return grads, norm


class AdamState:
    def __init__(self, params):
        self.m = {n: np.zeros_like(t.values) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.values) for n, t in params.items()}
        self._scratch = {n: np.empty_like(t.values) for n, t in params.items()}


def adam_step(params, grads, state, step, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Standard bias-corrected Adam update, in place."""
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    scratch = getattr(state, "_scratch", None)
    for name, t in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        tmp = scratch[name] if scratch is not None else np.empty_like(g)
        m *= beta1
        np.multiply(g, 1.0 - beta1, out=tmp)
        m += tmp
        v *= beta2
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - beta2
        v += tmp
        np.divide(v, bc2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += eps
        np.divide(m, tmp, out=tmp)
        tmp *= lr / bc1
        t.values -= tmp


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model, adam, step, rng_state, configs, extra=None):
    entries = []
    offset = 0
    blob = bytearray()
    params = model.parameters()
    for name, t in params.items():
        entries.append({"name": name, "shape": list(t.values.shape), "offset": offset})
        raw = t.values.astype("<f8").tobytes()
        blob += raw
        offset += len(raw)
    moments_offset = offset
    for which in (adam.m, adam.v):
        for name in params:
            blob += which[name].astype("<f8").tobytes()
    with open(str(path) + ".bin", "wb") as f:
        f.write(bytes(blob))
    manifest = {
        "step": step,
        "tensors": entries,
        "moments_offset": moments_offset,
        "rng_state": _jsonable_rng(rng_state),
        "configs": configs,
        "has_recognizer": model.has_recognizer,
    }
    if extra:
        manifest.update(extra)
    with open(str(path) + ".json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def _jsonable_rng(state):
    def conv(x):
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        if isinstance(x, np.integer):
            return int(x)
        return x
    return conv(state)


def load_checkpoint(path):
    """Returns (model, adam_state, step, rng_state, manifest)."""
    with open(str(path) + ".json") as f:
        manifest = json.load(f)
    cfgs = manifest["configs"]
    model = Model(ModelConfig(**cfgs["model"]), seed=cfgs["train"]["seed"],
                  build_recognizer=manifest["has_recognizer"])
    with open(str(path) + ".bin", "rb") as f:
        blob = f.read()
    params = model.parameters()
    for entry in manifest["tensors"]:
        t = params[entry["name"]]
        n = t.values.size
        t.values[:] = np.frombuffer(
            blob, dtype="<f8", count=n, offset=entry["offset"]).reshape(t.values.shape)
    adam = AdamState(params)
    off = manifest["moments_offset"]
    for which in (adam.m, adam.v):
        for entry in manifest["tensors"]:
            arr = which[entry["name"]]
            arr[:] = np.frombuffer(blob, dtype="<f8", count=arr.size,
                                   offset=off).reshape(arr.shape)
            off += arr.size * 8
    return model, adam, manifest["step"], manifest["rng_state"], manifest


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------

class Trainer:
    def __init__(self, corpus, pipeline: data_mod.PipelineConfig,
                 train_cfg: TrainConfig, loss_cfg: losses_mod.LossConfig,
                 out_dir=None, build_recognizer=True, config_hash=""):
        pipeline.validate()
        loss_cfg.validate()
        data_mod.validate_corpus(corpus, pipeline.reduction)
        self.corpus = corpus
        self.pipeline = pipeline
        self.cfg = train_cfg
        self.loss_cfg = loss_cfg
        self.out_dir = out_dir
        self.config_hash = config_hash
        self.build_recognizer = build_recognizer

        r = pipeline.reduction
        train_utts, val_utts = corpus.split()
        self.stats = data_mod.compute_stats(train_utts)
        self.train_prepared = [
            data_mod.prepare_utterance(self.stats.normalize(u), r) for u in train_utts]
        self.val_prepared = [
            data_mod.prepare_utterance(self.stats.normalize(u), r) for u in val_utts]

        self.model_config = ModelConfig(
            vocab_size=corpus.config.alphabet_size,
            d_mel=corpus.config.d_mel, d_lin=corpus.config.d_lin,
            reduction=r, embed_dim=train_cfg.embed_dim,
            enc_hidden=train_cfg.enc_hidden, dec_hidden=train_cfg.dec_hidden,
            rec_hidden=train_cfg.rec_hidden, attn_dim=train_cfg.attn_dim,
            attn_filters=train_cfg.attn_filters, attn_kernel=train_cfg.attn_kernel,
            prenet_dim=train_cfg.prenet_dim, prenet_dropout=train_cfg.prenet_dropout,
            conv_kernel=train_cfg.conv_kernel, stop_threshold=train_cfg.stop_threshold)
        self.model = Model(self.model_config, seed=train_cfg.seed,
                           build_recognizer=build_recognizer)
        self.adam = AdamState(self.model.parameters())
        self.rng = np.random.default_rng(
            np.random.SeedSequence(train_cfg.seed, spawn_key=(2,)))
        self.step = 0
        self.metrics = []
        self._window = []
        self._last_grad_norm = 0.0
        self._track_ctc = build_recognizer and loss_cfg.lambda_ctc > 0

    # -- persistence ------------------------------------------------------

    def _configs_dict(self):
        return {
            "model": dataclasses.asdict(self.model_config),
            "train": dataclasses.asdict(self.cfg),
            "pipeline": dataclasses.asdict(self.pipeline),
            "loss": dataclasses.asdict(self.loss_cfg),
            "corpus": dataclasses.asdict(self.corpus.config),
        }

    def save(self, path):
        save_checkpoint(path, self.model, self.adam, self.step,
                        self.rng.bit_generator.state, self._configs_dict(),
                        extra={"config_hash": self.config_hash})

    def restore(self, path):
        model, adam, step, rng_state, manifest = load_checkpoint(path)
        self.model = model
        self.adam = adam
        self.step = step
        self.rng.bit_generator.state = rng_state
        return manifest

    # -- one optimization step -------------------------------------------

    def _sample_batch(self):
        idx = self.rng.choice(len(self.train_prepared),
                              size=min(self.pipeline.batch_size,
                                       len(self.train_prepared)),
                              replace=False)
        return data_mod.batch_assemble([self.train_prepared[i] for i in idx],
                                       self.pipeline.reduction,
                                       repeat_padding=self.pipeline.repeat_padding)

    def train_step(self):
        self.step += 1
        batch = self._sample_batch()
        self.model.zero_grad()
        preds = self.model.forward_teacher(
            batch, train_mode=True, rng=self.rng,
            dfr=self.pipeline.drop_frame_rate)
        bd = losses_mod.composite_loss(preds, batch, self.loss_cfg,
                                       model=self.model)
        total = float(bd.total.values)
        if not np.isfinite(total):
            raise NanAbortError(self.step, self._last_checkpoint())
        bd.total.backward()
        grads = {n: (np.zeros_like(t.values) if t.grad is None else t.grad)
                 for n, t in self.model.parameters().items()}
        grads, norm = clip_global_norm(grads, self.cfg.clip_norm)
        self._last_grad_norm = norm
        lr = lr_at(self.step, self.cfg.base_lr, self.cfg.warm_steps)
        adam_step(self.model.parameters(), grads, self.adam, self.step, lr,
                  self.cfg.beta1, self.cfg.beta2, self.cfg.eps)
        self._window.append((bd.mel_l1, bd.linear_l1, bd.stop_ce, bd.ctc))
        return bd

    # -- evaluation -------------------------------------------------------

    def evaluate_validation(self):
        """Loss components on the validation split, dropout and DFR off."""
        sums = np.zeros(4)
        mi_sum, mi_count = 0.0, 0
        n = 0
        bs = self.pipeline.batch_size
        for lo in range(0, len(self.val_prepared), bs):
            chunk = self.val_prepared[lo:lo + bs]
            batch = data_mod.batch_assemble(chunk, self.pipeline.reduction,
                                            repeat_padding=self.pipeline.repeat_padding)
            preds = self.model.forward_teacher(batch, train_mode=False)
            bd = losses_mod.composite_loss(preds, batch, self.loss_cfg,
                                           model=self.model)
            sums += np.array([bd.mel_l1, bd.linear_l1, bd.stop_ce, bd.ctc]) * len(chunk)
            n += len(chunk)
            if self._track_ctc:
                lp = self.model.recognize(preds["mel"], batch.frame_mask)
                raw = ctc_mod.ctc_loss_batch(lp, batch.ctc_targets,
                                             batch.frame_lengths,
                                             blank=self.corpus.blank_id,
                                             average_by_frames=False)
                mi_sum += float(raw.values) * len(chunk)
                mi_count += len(chunk)
        comps = sums / n
        mi = None
        if mi_count:
            mi = losses_mod.mi_lower_bound(mi_sum / mi_count,
                                           self.corpus.text_entropy())
        return comps, mi

    def _record_metrics(self):
        window = np.array(self._window) if self._window else np.zeros((1, 4))
        train = window.mean(axis=0)
        val, mi = self.evaluate_validation()
        fmt = lambda x: f"{x:.10g}"
        ctc_cols = self._track_ctc
        row = {
            "step": str(self.step),
            "train_mel_l1": fmt(train[0]),
            "train_linear_l1": fmt(train[1]),
            "train_stop_ce": fmt(train[2]),
            "train_ctc": fmt(train[3]) if ctc_cols else "",
            "val_mel_l1": fmt(val[0]),
            "val_linear_l1": fmt(val[1]),
            "val_stop_ce": fmt(val[2]),
            "val_ctc": fmt(val[3]) if ctc_cols else "",
            "mi_lower_bound": fmt(mi) if mi is not None else "",
            "lr": fmt(lr_at(self.step, self.cfg.base_lr, self.cfg.warm_steps)),
            "grad_norm": fmt(self._last_grad_norm),
        }
        self.metrics.append(row)
        self._window = []
        return row

    # -- the loop ---------------------------------------------------------

    def _checkpoint_path(self, tag):
        return os.path.join(self.out_dir, f"ckpt_{tag}")

    def _last_checkpoint(self):
        if self.out_dir is None:
            return None
        path = self._checkpoint_path("last")
        return path if os.path.exists(path + ".json") else None

    def train(self, progress=None):
        """Run to max_steps; returns the metric rows."""
        while self.step < self.cfg.max_steps:
            self.train_step()
            if self.step % self.cfg.eval_every == 0 or self.step == self.cfg.max_steps:
                row = self._record_metrics()
                if progress:
                    progress(row)
                if self.out_dir:
                    self.write_metrics()
            if self.out_dir and (self.step % self.cfg.checkpoint_every == 0
                                 or self.step == self.cfg.max_steps):
                self.save(self._checkpoint_path("last"))
        return self.metrics

    def write_metrics(self, path=None):
        if path is None:
            path = os.path.join(self.out_dir, "metrics.csv")
        with open(path, "w") as f:
            f.write("# config_hash=%s seed=%d\n" % (self.config_hash, self.cfg.seed))
            f.write(",".join(METRIC_COLUMNS) + "\n")
            for row in self.metrics:
                f.write(",".join(row[c] for c in METRIC_COLUMNS) + "\n")
        return path


def read_metrics(path):
    """Parse a metrics.csv written by Trainer.write_metrics."""
    rows = []
    with open(path) as f:
        lines = [ln for ln in f.read().splitlines() if not ln.startswith("#")]
    header = lines[0].split(",")
    for line in lines[1:]:
        rows.append(dict(zip(header, line.split(","))))
    return rows


def reconstruction_gap(metrics_row):
    """Validation-minus-train reconstruction error for one metric row."""
    val = float(metrics_row["val_mel_l1"]) + float(metrics_row["val_linear_l1"])
    train = float(metrics_row["train_mel_l1"]) + float(metrics_row["train_linear_l1"])
    return val - train
