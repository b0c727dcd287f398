"""Composite training objective and the mutual-information lower bound.

total = mel_l1 + linear_l1 + stop_ce + lambda * ctc

The L1 terms are masked means over valid frames and feature dims; stop_ce is
a masked mean binary cross-entropy with a configurable positive-class weight
(one positive step per utterance otherwise drowns). The CTC term is frame
averaged by default so its gradients stay commensurate with the frame
averaged reconstruction terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ctc
from . import tensor as T
from .tensor import Tensor


@dataclass
class LossConfig:
    lambda_ctc: float = 1.0
    average_ctc_by_frames: bool = True
    stop_positive_weight: float = 5.0

    def validate(self):
        if self.lambda_ctc < 0:
            raise ValueError("lambda must be non-negative")
        if self.stop_positive_weight < 1:
            raise ValueError("stop positive weight must be >= 1")


@dataclass
class LossBreakdown:
    mel_l1: float
    linear_l1: float
    stop_ce: float
    ctc: float
    total: Tensor               # differentiable

    def components_sum(self, lam):
        return self.mel_l1 + self.linear_l1 + self.stop_ce + lam * self.ctc


def masked_mean(err, mask):
    """Per-utterance masked mean, then mean over the batch.

    err: (B, N, D) or (B, N) tensor; mask: (B, N) ndarray. Normalizing per
    utterance first keeps the batch loss equal to the mean of per-utterance
    losses regardless of length spread.
    """
    if err.values.shape[:2] != mask.shape:
        raise T.ShapeError(
            f"masked_mean: loss shape {err.values.shape} vs mask {mask.shape}")
    lengths = mask.sum(axis=1)
    if np.any(lengths == 0):
        raise ValueError("masked_mean: utterance with empty mask")
    b = mask.shape[0]
    if err.values.ndim == 3:
        d = err.values.shape[2]
        w = np.repeat(mask[:, :, None], d, axis=2) / (lengths[:, None, None] * d * b)
    else:
        w = mask / (lengths[:, None] * b)
    return T.tsum(T.mul(err, Tensor(w)))


def composite_loss(predictions, batch, config: LossConfig, model=None,
                   recognizer_log_probs=None):
    """LossBreakdown for one teacher-forced batch.

    predictions: dict from Model.forward_teacher. The CTC term is computed
    from ``recognizer_log_probs`` if given, else from model.recognize on the
    predicted mel; with lambda == 0 and no log-probs supplied the recognizer
    graph is never constructed and the objective is exactly the baseline.
    """
    config.validate()
    mel_err = T.tabs(T.sub(predictions["mel"], Tensor(batch.mel_targets)))
    lin_err = T.tabs(T.sub(predictions["linear"], Tensor(batch.lin_targets)))
    mel_l1 = masked_mean(mel_err, batch.frame_mask)
    lin_l1 = masked_mean(lin_err, batch.frame_mask)
    stop_err = T.bce_with_logits(predictions["stop_logits"], batch.stop_targets,
                                 pos_weight=config.stop_positive_weight)
    stop_ce = masked_mean(stop_err, batch.step_mask)

    total = T.add(T.add(mel_l1, lin_l1), stop_ce)
    ctc_value = 0.0
    if config.lambda_ctc > 0 or recognizer_log_probs is not None:
        if recognizer_log_probs is None:
            recognizer_log_probs = model.recognize(predictions["mel"],
                                                   batch.frame_mask)
        ctc_term = ctc.ctc_loss_batch(
            recognizer_log_probs, batch.ctc_targets, batch.frame_lengths,
            blank=recognizer_log_probs.values.shape[-1] - 1,
            average_by_frames=config.average_ctc_by_frames)
        ctc_value = float(ctc_term.values)
        if config.lambda_ctc > 0:
            total = T.add(total, ctc_term * config.lambda_ctc)
    return LossBreakdown(mel_l1=float(mel_l1.values), linear_l1=float(lin_l1.values),
                         stop_ce=float(stop_ce.values), ctc=ctc_value, total=total)


def mi_lower_bound(ctc_loss_per_utterance, text_entropy):
    """H(t) - E[-log q(t|x)]; diagnostic only, never optimized directly."""
    if text_entropy < 0:
        raise ValueError("entropy estimate must be non-negative")
    return text_entropy - ctc_loss_per_utterance
