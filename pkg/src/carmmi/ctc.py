"""CTC loss (log-space forward-backward), greedy decoding, brute-force oracle.

The dynamic-programming loss carries an analytic backward rule into the
per-frame log-probabilities, so it plugs into the autodiff graph as a single
node. A batched entry point exists for the trainer; the public single-utterance
``ctc_loss`` wraps it.

Log-zero is the finite sentinel NEG_INF so every logaddexp stays total.
"""

from __future__ import annotations

import itertools

import numpy as np

from . import tensor as T

NEG_INF = -1e30


class InfeasibleTargetError(ValueError):
    """Target cannot be aligned within the given number of frames."""

    def __init__(self, frames, required):
        super().__init__(
            f"infeasible-target: {frames} frames available, "
            f"alignment needs at least {required}")
        self.frames = frames
        self.required = required


class InstanceTooLargeError(ValueError):
    """Brute-force oracle refused: enumeration would be astronomically large."""


def min_frames(labels):
    """Minimum T that admits an alignment: |labels| plus one blank per repeat."""
    labels = list(labels)
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def check_feasible(num_frames, labels):
    need = min_frames(labels)
    if num_frames < need:
        raise InfeasibleTargetError(num_frames, need)


def _expand(labels, blank):
    """Blank-interleaved state sequence: [b, l1, b, l2, ..., b]."""
    ext = np.full(2 * len(labels) + 1, blank, dtype=np.int64)
    ext[1::2] = labels
    return ext


def _collapse(path, blank):
    out = []
    prev = None
    for p in path:
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return out


def _forward_backward(log_probs, labels, blank):
    """Return (neg_log_like, grad_wrt_log_probs) for one utterance.

    log_probs: (t_len, v+1) array of per-frame log-distributions.
    """
    t_len = log_probs.shape[0]
    ext = _expand(labels, blank)
    s = len(ext)
    # allow a diagonal skip where the state two back carries a different label
    can_skip = np.zeros(s, dtype=bool)
    can_skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    alpha = np.full((t_len, s), NEG_INF)
    alpha[0, 0] = log_probs[0, ext[0]]
    if s > 1:
        alpha[0, 1] = log_probs[0, ext[1]]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        stay = prev
        step = np.full(s, NEG_INF)
        step[1:] = prev[:-1]
        skip = np.full(s, NEG_INF)
        skip[2:] = np.where(can_skip[2:], prev[:-2], NEG_INF)
        alpha[t] = np.logaddexp(np.logaddexp(stay, step), skip) + log_probs[t, ext]

    log_like = np.logaddexp(alpha[t_len - 1, s - 1],
                            alpha[t_len - 1, s - 2] if s > 1 else NEG_INF)
    if log_like < NEG_INF / 2:
        # guarded by check_feasible; kept total for direct callers
        return -log_like, np.zeros_like(log_probs)

    # beta excludes the emission at t, so alpha_t + beta_t sums paths exactly
    beta = np.full((t_len, s), NEG_INF)
    beta[t_len - 1, s - 1] = 0.0
    if s > 1:
        beta[t_len - 1, s - 2] = 0.0
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1] + log_probs[t + 1, ext]
        stay = nxt
        step = np.full(s, NEG_INF)
        step[:-1] = nxt[1:]
        skip = np.full(s, NEG_INF)
        skip[:-2] = np.where(can_skip[2:], nxt[2:], NEG_INF)
        beta[t] = np.logaddexp(np.logaddexp(stay, step), skip)

    # d log_like / d log_probs[t, k] = sum over states with label k of the
    # posterior occupancy exp(alpha + beta - log_like)
    occupancy = np.exp(np.clip(alpha + beta - log_like, -700, 0))
    grad = np.zeros_like(log_probs)
    for si in range(s):
        grad[:, ext[si]] += occupancy[:, si]
    return -log_like, -grad


def ctc_loss(log_probs, target_labels, blank, average_by_frames=True):
    """Negative log-likelihood of the label sequence under CTC, as a graph node.

    log_probs: Tensor (T, V+1), rows are log-distributions.
    """
    labels = list(target_labels)
    if not labels:
        raise ValueError("ctc_loss: empty target")
    if blank in labels:
        raise ValueError("ctc_loss: blank id appears in target labels")
    lp = log_probs.values
    if lp.ndim != 2:
        raise T.ShapeError(f"ctc_loss: expected (T, V+1) log-probs, got {lp.shape}")
    check_feasible(lp.shape[0], labels)
    nll, grad = _forward_backward(lp, np.asarray(labels, dtype=np.int64), blank)
    if average_by_frames:
        nll /= lp.shape[0]
        grad = grad / lp.shape[0]

    def bwd(g):
        log_probs._accumulate(float(g) * grad)
    return T._make(np.float64(nll), (log_probs,), bwd, "ctc_loss")


def ctc_loss_batch(log_probs, targets, frame_lengths, blank, average_by_frames=True):
    """Mean CTC loss over a batch as one graph node.

    log_probs: Tensor (B, T, V+1); targets: list of label sequences;
    frame_lengths: per-item valid frame counts (padding rows ignored).
    """
    lp = log_probs.values
    batch = lp.shape[0]
    total = 0.0
    grad = np.zeros_like(lp)
    for i in range(batch):
        labels = list(targets[i])
        n = int(frame_lengths[i])
        check_feasible(n, labels)
        nll, g = _forward_backward(lp[i, :n], np.asarray(labels, dtype=np.int64), blank)
        if average_by_frames:
            nll /= n
            g = g / n
        total += nll
        grad[i, :n] = g
    grad /= batch

    def bwd(gout):
        log_probs._accumulate(float(gout) * grad)
    return T._make(np.float64(total / batch), (log_probs,), bwd, "ctc_loss_batch")


def ctc_brute_force(log_probs, target_labels, blank, average_by_frames=True):
    """Enumerate every frame labelling and sum those that collapse to the target.

    Test oracle only; refuses instances beyond T<=8, V<=5.
    """
    lp = np.asarray(log_probs.values if isinstance(log_probs, T.Tensor) else log_probs)
    t_len, nv = lp.shape
    if t_len > 8 or nv - 1 > 5:
        raise InstanceTooLargeError(f"refusing T={t_len}, V={nv - 1}")
    target = list(target_labels)
    total = NEG_INF
    for path in itertools.product(range(nv), repeat=t_len):
        if _collapse(path, blank) == target:
            total = np.logaddexp(total, sum(lp[t, k] for t, k in enumerate(path)))
    nll = -total
    return nll / t_len if average_by_frames else nll


def ctc_greedy_decode(log_probs, blank):
    """Best-path decode: per-frame argmax, collapse repeats, drop blanks."""
    lp = log_probs.values if isinstance(log_probs, T.Tensor) else np.asarray(log_probs)
    return _collapse(np.argmax(lp, axis=-1).tolist(), blank)
