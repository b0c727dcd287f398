"""Synthetic text-to-feature corpus and the training input pipeline.

Each token id owns a fixed random template vector in mel space; an utterance
emits each token for a random duration with smooth AR(1) noise on top, so
consecutive frames are highly redundant - the redundancy that lets a purely
autoregressive decoder explain its target without consulting the text. A
second "linear" feature stream is a fixed random linear map of the mel frame
plus independent noise, so both reconstruction terms of the composite loss
have work to do.

Corpus files are flat binary (see ``save_corpus``) with a JSON sidecar
manifest carrying the config and seed.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import ctc

MAGIC = b"CARC"
VERSION = 1

AR_COEFF = 0.9


@dataclass
class SynthCorpusConfig:
    alphabet_size: int = 12
    duration_min: int = 2
    duration_max: int = 4
    d_mel: int = 8
    d_lin: int = 12
    noise_std: float = 0.35
    utt_len_min: int = 2
    utt_len_max: int = 6
    corpus_size: int = 2000
    validation_fraction: float = 1.0 / 64.0
    seed: int = 0

    def validate(self):
        if self.duration_min < 2:
            raise ValueError("duration_min must be >= 2 so repeated tokens stay CTC-feasible")
        if self.alphabet_size < 4:
            raise ValueError("alphabet_size must be >= 4")
        if not (1 <= self.utt_len_min <= self.utt_len_max):
            raise ValueError("bad utterance length range")
        if self.duration_max < self.duration_min:
            raise ValueError("bad duration range")


@dataclass
class PipelineConfig:
    """Knobs applied between the raw corpus and the model."""
    reduction: int = 2
    drop_frame_rate: float = 0.0
    frame_shift_multiplier: float = 1.0
    batch_size: int = 8
    repeat_padding: bool = False

    def validate(self):
        if self.reduction not in (1, 2, 5):
            raise ValueError("reduction factor must be one of 1, 2, 5")
        if not 0.0 <= self.drop_frame_rate < 1.0:
            raise ValueError("drop_frame_rate must be in [0, 1)")
        if self.frame_shift_multiplier not in (1, 2.5):
            raise ValueError("frame_shift_multiplier must be 1 or 2.5")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass
class Utterance:
    tokens: np.ndarray          # (L,) int64
    mel: np.ndarray             # (N, D_mel)
    linear: np.ndarray          # (N, D_lin)

    @property
    def n_frames(self):
        return self.mel.shape[0]


@dataclass
class PreparedUtterance:
    """Utterance padded to a multiple of the reduction factor, with stop targets."""
    tokens: np.ndarray
    mel: np.ndarray             # (N, D_mel), N % r == 0
    linear: np.ndarray
    stop_targets: np.ndarray    # (N,) binary, ones exactly on the final group
    reduction: int

    @property
    def n_frames(self):
        return self.mel.shape[0]

    @property
    def n_steps(self):
        return self.mel.shape[0] // self.reduction


@dataclass
class Corpus:
    config: SynthCorpusConfig
    utterances: list
    templates: np.ndarray       # (V, D_mel)
    linear_map: np.ndarray      # (D_mel, D_lin)

    @property
    def blank_id(self):
        return self.config.alphabet_size

    def split(self):
        """(train, validation) utterance lists; validation is the tail slice."""
        n_val = max(1, round(len(self.utterances) * self.config.validation_fraction))
        return self.utterances[:-n_val], self.utterances[-n_val:]

    def text_entropy(self):
        """Closed-form per-utterance token-sequence entropy of the generator (nats).

        Length is uniform over the configured range; the first token is uniform
        over the alphabet and each later token uniform over the other V-1 ids.
        """
        cfg = self.config
        n_lengths = cfg.utt_len_max - cfg.utt_len_min + 1
        mean_len = (cfg.utt_len_min + cfg.utt_len_max) / 2.0
        return (np.log(n_lengths) + np.log(cfg.alphabet_size)
                + (mean_len - 1.0) * np.log(cfg.alphabet_size - 1))


def _utterance_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, index)))


def _ar1_noise(rng, n, dim, std):
    """Stationary AR(1) noise with marginal std `std` and coefficient 0.9."""
    if std == 0.0:
        return np.zeros((n, dim))
    innov_std = std * np.sqrt(1.0 - AR_COEFF ** 2)
    out = np.empty((n, dim))
    out[0] = rng.normal(0.0, std, size=dim)
    for t in range(1, n):
        out[t] = AR_COEFF * out[t - 1] + rng.normal(0.0, innov_std, size=dim)
    return out


def sample_text(rng, alphabet_size, length):
    """Token sequence with no adjacent repeats.

    Keeping neighbours distinct means a contiguous run of one template always
    reads as a single token, however long the run is -- so token identity never
    hinges on frame counts, which duration jitter and reduction-factor padding
    both perturb.
    """
    tokens = np.empty(length, dtype=np.int64)
    tokens[0] = rng.integers(alphabet_size)
    draws = rng.integers(alphabet_size - 1, size=length - 1)
    for j in range(1, length):
        d = draws[j - 1]
        tokens[j] = d + (d >= tokens[j - 1])
    return tokens


def generate_corpus(config: SynthCorpusConfig) -> Corpus:
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(0,)))
    sigma = config.noise_std
    # token templates, resampled until all pairwise distances clear 4 sigma
    for _ in range(1000):
        templates = rng.normal(0.0, 1.0, size=(config.alphabet_size, config.d_mel))
        diff = templates[:, None, :] - templates[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        if dist.min() > 4.0 * sigma:
            break
    else:
        raise RuntimeError("could not draw token templates separated by 4 sigma")
    linear_map = rng.normal(0.0, 1.0 / np.sqrt(config.d_mel),
                            size=(config.d_mel, config.d_lin))

    utterances = []
    for i in range(config.corpus_size):
        urng = _utterance_rng(config.seed, i)
        length = int(urng.integers(config.utt_len_min, config.utt_len_max + 1))
        tokens = sample_text(urng, config.alphabet_size, length)
        durations = urng.integers(config.duration_min, config.duration_max + 1,
                                  size=length)
        mel = np.repeat(templates[tokens], durations, axis=0)
        n = mel.shape[0]
        mel = mel + _ar1_noise(urng, n, config.d_mel, sigma)
        linear = mel @ linear_map + urng.normal(0.0, sigma, size=(n, config.d_lin))
        utterances.append(Utterance(tokens.astype(np.int64), mel, linear))
    return Corpus(config, utterances, templates, linear_map)


# ---------------------------------------------------------------------------
# reduction pipeline
# ---------------------------------------------------------------------------

def pad_to_multiple(features, r):
    """Repeat-pad the final frame until the frame count divides r."""
    n = features.shape[0]
    rem = (-n) % r
    if rem == 0:
        return features
    return np.concatenate([features, np.repeat(features[-1:], rem, axis=0)])


def prepare_utterance(utt: Utterance, r: int) -> PreparedUtterance:
    mel = pad_to_multiple(utt.mel, r)
    linear = pad_to_multiple(utt.linear, r)
    stop = np.zeros(mel.shape[0])
    stop[-r:] = 1.0
    return PreparedUtterance(utt.tokens, mel, linear, stop, r)


def reduction_group(features, r):
    """Split (N, D) into decoder inputs and grouped targets.

    Decoder input for group k is the last frame of group k-1 (zero go-frame
    for k=0); targets are (N/r, r, D).
    """
    n, d = features.shape
    if n % r != 0:
        raise ValueError(f"reduction_group: {n} frames not divisible by r={r}")
    steps = n // r
    grouped = features.reshape(steps, r, d)
    inputs = np.zeros((steps, d))
    inputs[1:] = grouped[:-1, -1, :]
    return inputs, grouped


def drop_frames(decoder_inputs, dfr, rng):
    """Zero out whole input frames independently with probability dfr."""
    if not 0.0 <= dfr <= 1.0:
        raise ValueError(f"drop frame rate {dfr} outside [0, 1]")
    if dfr == 0.0:
        return decoder_inputs
    keep = rng.random(decoder_inputs.shape[:-1]) >= dfr
    return decoder_inputs * keep[..., None]


def subsample(features, multiplier):
    """Temporal subsampling emulating a larger frame shift."""
    if multiplier == 1:
        return features
    n = features.shape[0]
    idx = np.unique((np.arange(0, n, multiplier)).astype(int))
    return features[idx]


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

@dataclass
class FeatureStats:
    mel_mean: np.ndarray
    mel_std: np.ndarray
    lin_mean: np.ndarray
    lin_std: np.ndarray

    def normalize(self, utt: Utterance) -> Utterance:
        return Utterance(utt.tokens,
                         (utt.mel - self.mel_mean) / self.mel_std,
                         (utt.linear - self.lin_mean) / self.lin_std)

    def denormalize_mel(self, mel):
        return mel * self.mel_std + self.mel_mean


def compute_stats(train_utterances) -> FeatureStats:
    mel = np.concatenate([u.mel for u in train_utterances])
    lin = np.concatenate([u.linear for u in train_utterances])

    def _std(x):
        s = x.std(0)
        s[s < 1e-12] = 1.0  # degenerate constant dims stay untouched
        return s
    return FeatureStats(mel.mean(0), _std(mel), lin.mean(0), _std(lin))


# ---------------------------------------------------------------------------
# teacher-forcing Euclidean distance analysis
# ---------------------------------------------------------------------------

def teacher_forcing_ed(feature_list, r, shift_multiplier=1):
    """Frame-averaged Euclidean distance between teacher input and target.

    feature_list: normalized per-utterance feature matrices. The teacher
    input for a group is the last frame of the previous group, repeated r
    times. The go-frame before the first group is the utterance's first
    frame: a zero go-frame would compare whole first groups against the
    origin, which on short utterances is closer in expectation than a real
    decorrelated frame and distorts the reduction-factor ordering.
    """
    total, frames = 0.0, 0
    for feats in feature_list:
        feats = subsample(feats, shift_multiplier)
        feats = pad_to_multiple(feats, r)
        inputs, grouped = reduction_group(feats, r)
        inputs = inputs.copy()
        inputs[0] = feats[0]
        teacher = np.repeat(inputs, r, axis=0)
        target = grouped.reshape(-1, feats.shape[1])
        total += float(np.sqrt(((teacher - target) ** 2).sum(axis=1)).sum())
        frames += target.shape[0]
    return total / frames


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    tokens: np.ndarray          # (B, Lmax) int64, padded with 0
    token_lengths: np.ndarray   # (B,)
    token_mask: np.ndarray      # (B, Lmax)
    decoder_inputs: np.ndarray  # (B, Smax, D_mel)
    mel_targets: np.ndarray     # (B, Smax*r, D_mel)
    lin_targets: np.ndarray     # (B, Smax*r, D_lin)
    stop_targets: np.ndarray    # (B, Smax) per decoder step
    frame_mask: np.ndarray      # (B, Smax*r)
    step_mask: np.ndarray       # (B, Smax)
    frame_lengths: np.ndarray   # (B,)
    ctc_targets: list           # per-item token lists
    reduction: int


def batch_assemble(prepared, r, repeat_padding=False):
    """Pad a list of PreparedUtterance to common length with validity masks.

    Zero padding plus masks by default; ``repeat_padding`` duplicates the
    final frame/token instead (the masks still mark padded positions).
    """
    if not prepared:
        raise ValueError("batch_assemble: empty batch")
    b = len(prepared)
    l_max = max(len(u.tokens) for u in prepared)
    n_max = max(u.n_frames for u in prepared)
    s_max = n_max // r
    d_mel = prepared[0].mel.shape[1]
    d_lin = prepared[0].linear.shape[1]

    tokens = np.zeros((b, l_max), dtype=np.int64)
    token_mask = np.zeros((b, l_max))
    dec_in = np.zeros((b, s_max, d_mel))
    mel_t = np.zeros((b, n_max, d_mel))
    lin_t = np.zeros((b, n_max, d_lin))
    stop_t = np.zeros((b, s_max))
    frame_mask = np.zeros((b, n_max))
    step_mask = np.zeros((b, s_max))
    token_lengths = np.zeros(b, dtype=np.int64)
    frame_lengths = np.zeros(b, dtype=np.int64)
    ctc_targets = []

    for i, u in enumerate(prepared):
        if u.reduction != r:
            raise ValueError("batch_assemble: utterance prepared for a different r")
        l, n = len(u.tokens), u.n_frames
        tokens[i, :l] = u.tokens
        token_mask[i, :l] = 1.0
        mel_t[i, :n] = u.mel
        lin_t[i, :n] = u.linear
        frame_mask[i, :n] = 1.0
        step_mask[i, : n // r] = 1.0
        stop_t[i, : n // r] = u.stop_targets[r - 1 :: r][: n // r]
        inputs, _ = reduction_group(u.mel, r)
        dec_in[i, : n // r] = inputs
        token_lengths[i] = l
        frame_lengths[i] = n
        ctc_targets.append(u.tokens.tolist())
        if repeat_padding:
            tokens[i, l:] = u.tokens[-1]
            mel_t[i, n:] = u.mel[-1]
            lin_t[i, n:] = u.linear[-1]
            dec_in[i, n // r :] = u.mel[-1]
    return Batch(tokens, token_lengths, token_mask, dec_in, mel_t, lin_t, stop_t,
                 frame_mask, step_mask, frame_lengths, ctc_targets, r)


def validate_corpus(corpus: Corpus, r: int):
    """Every utterance must stay CTC-feasible after reduction padding."""
    for i, u in enumerate(corpus.utterances):
        n = u.n_frames + ((-u.n_frames) % r)
        try:
            ctc.check_feasible(n, u.tokens.tolist())
        except ctc.InfeasibleTargetError as exc:
            raise ValueError(f"utterance {i} infeasible at r={r}: {exc}") from exc


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_corpus(corpus: Corpus, path, extra_manifest=None):
    cfg = corpus.config
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IIIII", VERSION, cfg.alphabet_size, cfg.d_mel,
                            cfg.d_lin, len(corpus.utterances)))
        f.write(corpus.templates.astype("<f8").tobytes())
        f.write(corpus.linear_map.astype("<f8").tobytes())
        for u in corpus.utterances:
            f.write(struct.pack("<II", len(u.tokens), u.n_frames))
            f.write(u.tokens.astype("<i4").tobytes())
            f.write(u.mel.astype("<f8").tobytes())
            f.write(u.linear.astype("<f8").tobytes())
    manifest = {"config": dataclasses.asdict(cfg), "count": len(corpus.utterances)}
    if extra_manifest:
        manifest.update(extra_manifest)
    with open(manifest_path(path), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def manifest_path(corpus_path):
    return str(corpus_path) + ".manifest.json"


def load_corpus(path) -> Corpus:
    with open(manifest_path(path)) as f:
        manifest = json.load(f)
    cfg = SynthCorpusConfig(**manifest["config"])
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path}: not a corpus file")
        version, v, d_mel, d_lin, count = struct.unpack("<IIIII", f.read(20))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported corpus version {version}")
        templates = np.frombuffer(f.read(8 * v * d_mel), dtype="<f8").reshape(v, d_mel)
        linear_map = np.frombuffer(f.read(8 * d_mel * d_lin),
                                   dtype="<f8").reshape(d_mel, d_lin)
        utterances = []
        for _ in range(count):
            l, n = struct.unpack("<II", f.read(8))
            tokens = np.frombuffer(f.read(4 * l), dtype="<i4").astype(np.int64)
            mel = np.frombuffer(f.read(8 * n * d_mel), dtype="<f8").reshape(n, d_mel)
            lin = np.frombuffer(f.read(8 * n * d_lin), dtype="<f8").reshape(n, d_lin)
            utterances.append(Utterance(tokens, mel.copy(), lin.copy()))
    return Corpus(cfg, utterances, templates.copy(), linear_map.copy())


def save_matrix(mat, path):
    """Single matrix in the corpus binary encoding (for external feature dirs)."""
    with open(path, "wb") as f:
        f.write(struct.pack("<II", mat.shape[0], mat.shape[1]))
        f.write(np.asarray(mat).astype("<f8").tobytes())


def load_matrix(path):
    with open(path, "rb") as f:
        rows, cols = struct.unpack("<II", f.read(8))
        return np.frombuffer(f.read(8 * rows * cols), dtype="<f8").reshape(rows, cols).copy()
