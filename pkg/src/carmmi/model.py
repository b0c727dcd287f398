"""The conditional-autoregressive synthesizer and its auxiliary recognizer.

Text encoder (embedding -> conv -> bi-GRU), location-sensitive attention,
autoregressive decoder with a dropout prenet and an r-frame reduction window,
a second "mixing" GRU between the attention context and the feature
projections (so the mel projection never sees the context directly), and a
CTC recognizer reading the predicted mel frames.

Parameters are grouped into alpha (encoder phi + decoder theta) and beta
(recognizer); each group draws from its own seeded RNG stream, so a build
without the recognizer is bit-identical on the alpha side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class ModelConfig:
    vocab_size: int             # text tokens; CTC blank is index vocab_size
    d_mel: int
    d_lin: int
    reduction: int = 2
    embed_dim: int = 32
    enc_hidden: int = 64        # bi-GRU total; must be even
    dec_hidden: int = 128
    rec_hidden: int = 64        # recognizer bi-GRU total; must be even
    attn_dim: int = 32
    attn_filters: int = 8
    attn_kernel: int = 7
    prenet_dim: int = 32
    prenet_dropout: float = 0.5
    conv_kernel: int = 5
    stop_threshold: float = 0.5
    dropout_at_inference: bool = False

    def validate(self):
        if self.enc_hidden % 2 or self.rec_hidden % 2:
            raise ValueError("bidirectional hidden sizes must be even")
        if self.reduction not in (1, 2, 5):
            raise ValueError("reduction factor must be one of {1, 2, 5}")


@dataclass
class AttentionState:
    weights: Tensor             # (B, L) distribution over encoder positions
    cumulative: Tensor          # running sum of past weights
    context: Tensor             # (B, H)


@dataclass
class DecoderStepOutput:
    mel: Tensor                 # (B, r*D_mel)
    linear: Tensor              # (B, r*D_lin)
    stop_logit: Tensor          # (B, 1)
    attention: AttentionState


@dataclass
class SynthesisResult:
    mel: np.ndarray             # (frames, D_mel)
    linear: np.ndarray
    attention: np.ndarray       # (steps, L)
    halt_reason: str            # "stop-token" | "max-frames"
    n_frames: int


def _uniform_fan_in(rng, shape):
    bound = 1.0 / np.sqrt(shape[0] if len(shape) == 2 else shape[0] * shape[1])
    return rng.uniform(-bound, bound, size=shape)


def _orthogonal_blocks(rng, h, n_blocks):
    blocks = []
    for _ in range(n_blocks):
        q, _ = np.linalg.qr(rng.normal(size=(h, h)))
        blocks.append(q)
    return np.concatenate(blocks, axis=1)


class _GRU:
    """Parameter bundle for one fused GRU cell."""

    def __init__(self, params, prefix, rng, d_in, hidden):
        self.hidden = hidden
        self.wx = params.add(f"{prefix}.wx", _uniform_fan_in(rng, (d_in, 3 * hidden)))
        self.wh = params.add(f"{prefix}.wh", _orthogonal_blocks(rng, hidden, 3))
        self.b = params.add(f"{prefix}.b", np.zeros(3 * hidden))

    def step(self, x, h):
        return T.gru_step(x, h, self.wx, self.wh, self.b)

    def project(self, seq):
        """Input projection of a whole (B, T, C) sequence in one matmul."""
        b, t_len, cdim = seq.values.shape
        flat = T.reshape(seq, (b * t_len, cdim))
        return T.reshape(T.matmul(flat, self.wx), (b, t_len, 3 * self.hidden))

    def cell(self, xp, h, mask=None):
        return T.gru_cell(xp, h, self.wh, self.b, mask)


class ParameterSet:
    """Named parameter tensors in insertion order."""

    def __init__(self):
        self.tensors = {}

    def add(self, name, values):
        t = T.parameter(np.asarray(values, dtype=np.float64), name=name)
        self.tensors[name] = t
        return t

    def items(self):
        return self.tensors.items()

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def all_finite(self):
        return all(np.all(np.isfinite(t.values)) for t in self.tensors.values())


def _component_rng(seed, key):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(10, key)))


class Model:
    def __init__(self, config: ModelConfig, seed: int, build_recognizer=True):
        config.validate()
        self.config = config
        c = config
        self.alpha = ParameterSet()
        self.beta = ParameterSet()
        p = self.alpha

        enc_rng = _component_rng(seed, 0)
        p.add("enc.embed", enc_rng.normal(0.0, 0.3, size=(c.vocab_size, c.embed_dim)))
        p.add("enc.conv", _uniform_fan_in(enc_rng, (c.conv_kernel, c.embed_dim, c.enc_hidden)))
        p.add("enc.conv_b", np.zeros(c.enc_hidden))
        half = c.enc_hidden // 2
        self.enc_fw = _GRU(p, "enc.fw", enc_rng, c.enc_hidden, half)
        self.enc_bw = _GRU(p, "enc.bw", enc_rng, c.enc_hidden, half)

        dec_rng = _component_rng(seed, 1)
        p.add("att.key", _uniform_fan_in(dec_rng, (c.enc_hidden, c.attn_dim)))
        p.add("att.query", _uniform_fan_in(dec_rng, (c.dec_hidden, c.attn_dim)))
        p.add("att.loc_conv", _uniform_fan_in(dec_rng, (c.attn_kernel, 1, c.attn_filters)))
        p.add("att.loc_proj", _uniform_fan_in(dec_rng, (c.attn_filters, c.attn_dim)))
        p.add("att.v", _uniform_fan_in(dec_rng, (c.attn_dim, 1)).reshape(-1))
        p.add("dec.pre1", _uniform_fan_in(dec_rng, (c.d_mel, c.prenet_dim)))
        p.add("dec.pre1_b", np.zeros(c.prenet_dim))
        p.add("dec.pre2", _uniform_fan_in(dec_rng, (c.prenet_dim, c.prenet_dim)))
        p.add("dec.pre2_b", np.zeros(c.prenet_dim))
        self.dec_gru = _GRU(p, "dec.gru", dec_rng,
                            c.prenet_dim + c.enc_hidden, c.dec_hidden)
        self.mix_gru = _GRU(p, "dec.mix", dec_rng,
                            c.dec_hidden + c.enc_hidden, c.dec_hidden)
        r = c.reduction
        p.add("dec.mel", _uniform_fan_in(dec_rng, (c.dec_hidden, r * c.d_mel)))
        p.add("dec.mel_b", np.zeros(r * c.d_mel))
        p.add("dec.lin", _uniform_fan_in(dec_rng, (c.dec_hidden, r * c.d_lin)))
        p.add("dec.lin_b", np.zeros(r * c.d_lin))
        p.add("dec.stop", _uniform_fan_in(dec_rng, (c.dec_hidden, 1)))
        p.add("dec.stop_b", np.zeros(1))

        self.has_recognizer = build_recognizer
        if build_recognizer:
            rec_rng = _component_rng(seed, 2)
            q = self.beta
            q.add("rec.conv", _uniform_fan_in(rec_rng, (c.conv_kernel, c.d_mel, c.rec_hidden)))
            q.add("rec.conv_b", np.zeros(c.rec_hidden))
            rhalf = c.rec_hidden // 2
            self.rec_fw = _GRU(q, "rec.fw", rec_rng, c.rec_hidden, rhalf)
            self.rec_bw = _GRU(q, "rec.bw", rec_rng, c.rec_hidden, rhalf)
            q.add("rec.out", _uniform_fan_in(rec_rng, (c.rec_hidden, c.vocab_size + 1)))
            q.add("rec.out_b", np.zeros(c.vocab_size + 1))

    # -- parameter access -------------------------------------------------

    def parameters(self):
        out = dict(self.alpha.items())
        out.update(dict(self.beta.items()))
        return out

    def zero_grad(self):
        self.alpha.zero_grad()
        self.beta.zero_grad()

    # -- encoder ----------------------------------------------------------

    def _bi_gru(self, seq, fw, bw, mask):
        """seq: (B, T, C) tensor; mask: (B, T) ndarray; returns (B, T, 2*half)."""
        b, t_len, _ = seq.values.shape
        half = fw.hidden
        outs_f, outs_b = [None] * t_len, [None] * t_len
        proj_f = fw.project(seq)
        proj_b = bw.project(seq)
        h = Tensor(np.zeros((b, half)))
        for t in range(t_len):
            xp = T.tslice(proj_f, (slice(None), t))
            h = fw.cell(xp, h, mask[:, t:t + 1])
            outs_f[t] = T.reshape(h, (b, 1, half))
        h = Tensor(np.zeros((b, half)))
        for t in range(t_len - 1, -1, -1):
            xp = T.tslice(proj_b, (slice(None), t))
            h = bw.cell(xp, h, mask[:, t:t + 1])
            outs_b[t] = T.reshape(h, (b, 1, half))
        fw_seq = T.concat(outs_f, axis=1)
        bw_seq = T.concat(outs_b, axis=1)
        return T.concat([fw_seq, bw_seq], axis=2)

    def encode_text(self, tokens, token_mask=None):
        """tokens: (B, L) int array -> encoder outputs (B, L, enc_hidden)."""
        tokens = np.atleast_2d(np.asarray(tokens))
        if token_mask is None:
            token_mask = np.ones(tokens.shape)
        if np.any(tokens < 0) or np.any(tokens >= self.config.vocab_size):
            raise ValueError(
                f"encode_text: token id out of range [0, {self.config.vocab_size})")
        p = self.alpha.tensors
        emb = T.embedding(p["enc.embed"], tokens)
        # zero padded positions so conv windows match an unpadded run exactly
        emb = T.mul(emb, Tensor(np.repeat(token_mask[:, :, None],
                                          self.config.embed_dim, axis=2)))
        conv = T.tanh(T.add(T.conv1d(emb, p["enc.conv"]), p["enc.conv_b"]))
        return self._bi_gru(conv, self.enc_fw, self.enc_bw, token_mask)

    def _attention_keys(self, enc_out):
        b, l, h = enc_out.values.shape
        p = self.alpha.tensors
        flat = T.reshape(enc_out, (b * l, h))
        return T.reshape(T.matmul(flat, p["att.key"]), (b, l, self.config.attn_dim))

    def initial_attention(self, batch_size, enc_len):
        return AttentionState(
            weights=Tensor(np.zeros((batch_size, enc_len))),
            cumulative=Tensor(np.zeros((batch_size, enc_len))),
            context=Tensor(np.zeros((batch_size, self.config.enc_hidden))))

    def attention_step(self, query, enc_out, keys, state, energy_bias=None):
        """query: (B, dec_hidden) -> next AttentionState.

        energy_bias: (B, L) ndarray, large negative at padded positions.
        """
        b, l, _ = enc_out.values.shape
        p = self.alpha.tensors
        cum3 = T.reshape(state.cumulative, (b, l, 1))
        loc = T.conv1d(cum3, p["att.loc_conv"])
        loc = T.reshape(T.matmul(T.reshape(loc, (b * l, self.config.attn_filters)),
                                 p["att.loc_proj"]), (b, l, self.config.attn_dim))
        q = T.matmul(query, p["att.query"])
        energies = T.attn_energies(q, keys, loc, p["att.v"])
        if energy_bias is not None:
            energies = T.add(energies, Tensor(energy_bias))
        weights = T.softmax(energies, axis=-1)
        return AttentionState(weights=weights,
                              cumulative=T.add(state.cumulative, weights),
                              context=T.attn_context(weights, enc_out))

    # -- decoder ----------------------------------------------------------

    def _prenet(self, frame, train_mode, rng):
        p = self.alpha.tensors
        rate = self.config.prenet_dropout if (
            train_mode or self.config.dropout_at_inference) else 0.0
        h = T.relu(T.add(T.matmul(frame, p["dec.pre1"]), p["dec.pre1_b"]))
        h = T.dropout(h, rate, rng)
        h = T.relu(T.add(T.matmul(h, p["dec.pre2"]), p["dec.pre2_b"]))
        return T.dropout(h, rate, rng)

    def decoder_step(self, prev_frame, dec_h, mix_h, att_state, enc_out, keys,
                     energy_bias=None, train_mode=True, rng=None):
        """One reduction step: r mel frames, r linear frames, one stop logit.

        prev_frame: (B, D_mel) tensor, the last frame of the previous group.
        Returns (DecoderStepOutput, dec_h, mix_h).
        """
        p = self.alpha.tensors
        pre = self._prenet(prev_frame, train_mode, rng)
        dec_h = self.dec_gru.step(T.concat([pre, att_state.context], axis=1), dec_h)
        att_state = self.attention_step(dec_h, enc_out, keys, att_state, energy_bias)
        mix_h = self.mix_gru.step(T.concat([dec_h, att_state.context], axis=1), mix_h)
        out = DecoderStepOutput(
            mel=T.add(T.matmul(mix_h, p["dec.mel"]), p["dec.mel_b"]),
            linear=T.add(T.matmul(mix_h, p["dec.lin"]), p["dec.lin_b"]),
            stop_logit=T.add(T.matmul(mix_h, p["dec.stop"]), p["dec.stop_b"]),
            attention=att_state)
        return out, dec_h, mix_h

    def forward_teacher(self, batch, train_mode=True, rng=None, dfr=0.0):
        """Teacher-forced pass over a Batch.

        Returns dict with mel (B, N, D_mel), linear (B, N, D_lin),
        stop_logits (B, S) tensors and the attention weight history (ndarray).
        """
        from . import data as data_mod

        c = self.config
        r = batch.reduction
        if r != c.reduction:
            raise ValueError(f"batch reduction {r} != model reduction {c.reduction}")
        b, s_max, _ = batch.decoder_inputs.shape
        dec_in = batch.decoder_inputs
        if train_mode and dfr > 0.0:
            dec_in = data_mod.drop_frames(dec_in, dfr, rng)
        enc_out = self.encode_text(batch.tokens, batch.token_mask)
        keys = self._attention_keys(enc_out)
        energy_bias = (batch.token_mask - 1.0) * 1e9

        att = self.initial_attention(b, batch.tokens.shape[1])
        dec_h = Tensor(np.zeros((b, c.dec_hidden)))
        mix_h = Tensor(np.zeros((b, c.dec_hidden)))
        # prenet on all steps at once and projections on the stacked mixing
        # states: only the recurrences themselves stay inside the step loop
        pre_all = self._prenet(
            T.reshape(Tensor(dec_in), (b * s_max, c.d_mel)), train_mode, rng)
        pre_all = T.reshape(pre_all, (b, s_max, c.prenet_dim))
        mix_seq, att_hist = [], []
        p = self.alpha.tensors
        for s in range(s_max):
            pre = T.tslice(pre_all, (slice(None), s))
            dec_h = self.dec_gru.step(T.concat([pre, att.context], axis=1), dec_h)
            att = self.attention_step(dec_h, enc_out, keys, att, energy_bias)
            mix_h = self.mix_gru.step(T.concat([dec_h, att.context], axis=1), mix_h)
            mix_seq.append(T.reshape(mix_h, (b, 1, c.dec_hidden)))
            att_hist.append(att.weights.values)
        flat = T.reshape(T.concat(mix_seq, axis=1), (b * s_max, c.dec_hidden))
        mel = T.add(T.matmul(flat, p["dec.mel"]), p["dec.mel_b"])
        linear = T.add(T.matmul(flat, p["dec.lin"]), p["dec.lin_b"])
        stop_logits = T.reshape(
            T.add(T.matmul(flat, p["dec.stop"]), p["dec.stop_b"]), (b, s_max))
        return {"mel": T.reshape(mel, (b, s_max * r, c.d_mel)),
                "linear": T.reshape(linear, (b, s_max * r, c.d_lin)),
                "stop_logits": stop_logits,
                "attention": np.stack(att_hist, axis=1)}

    # -- auxiliary recognizer --------------------------------------------

    def recognize(self, mel, frame_mask=None, stop_gradient=False):
        """Predicted mel (B, N, D_mel) -> per-frame log-distributions (B, N, V+1).

        Gradients flow into both the mel input and the recognizer parameters
        unless ``stop_gradient`` detaches the mel path.
        """
        if not self.has_recognizer:
            raise RuntimeError("model built without a recognizer")
        if stop_gradient:
            mel = mel.detach()
        b, n, _ = mel.values.shape
        if frame_mask is None:
            frame_mask = np.ones((b, n))
        q = self.beta.tensors
        # zero padded frames so conv windows match an unpadded run exactly
        mel = T.mul(mel, Tensor(np.repeat(frame_mask[:, :, None],
                                          self.config.d_mel, axis=2)))
        h = T.tanh(T.add(T.conv1d(mel, q["rec.conv"]), q["rec.conv_b"]))
        h = self._bi_gru(h, self.rec_fw, self.rec_bw, frame_mask)
        flat = T.reshape(h, (b * n, self.config.rec_hidden))
        logits = T.add(T.matmul(flat, q["rec.out"]), q["rec.out_b"])
        return T.log_softmax(T.reshape(logits, (b, n, self.config.vocab_size + 1)),
                             axis=-1)

    # -- free-running inference ------------------------------------------

    def synthesize_batch(self, token_seqs, max_frames, stop_threshold=None, rng=None):
        """Free-running generation for a list of token sequences.

        Feeds back the last predicted frame of each group; each item halts
        independently once sigmoid(stop) crosses the threshold.
        """
        c = self.config
        r = c.reduction
        if max_frames < r:
            raise ValueError("max_frames must be at least the reduction factor")
        if stop_threshold is None:
            stop_threshold = c.stop_threshold
        b = len(token_seqs)
        l_max = max(len(t) for t in token_seqs)
        tokens = np.zeros((b, l_max), dtype=np.int64)
        mask = np.zeros((b, l_max))
        for i, seq in enumerate(token_seqs):
            tokens[i, : len(seq)] = seq
            mask[i, : len(seq)] = 1.0
        enc_out = self.encode_text(tokens, mask)
        keys = self._attention_keys(enc_out)
        energy_bias = (mask - 1.0) * 1e9

        att = self.initial_attention(b, l_max)
        dec_h = Tensor(np.zeros((b, c.dec_hidden)))
        mix_h = Tensor(np.zeros((b, c.dec_hidden)))
        prev = Tensor(np.zeros((b, c.d_mel)))
        max_steps = max_frames // r
        done = np.zeros(b, dtype=bool)
        halt_step = np.full(b, max_steps, dtype=np.int64)
        mels, lins, att_hist = [], [], []
        for s in range(max_steps):
            out, dec_h, mix_h = self.decoder_step(
                prev, dec_h, mix_h, att, enc_out, keys, energy_bias,
                train_mode=False, rng=rng)
            att = out.attention
            mel_v = out.mel.values.reshape(b, r, c.d_mel)
            mels.append(mel_v)
            lins.append(out.linear.values.reshape(b, r, c.d_lin))
            att_hist.append(att.weights.values)
            stop_p = 1.0 / (1.0 + np.exp(-out.stop_logit.values[:, 0]))
            newly = (~done) & (stop_p > stop_threshold)
            halt_step[newly] = s + 1
            done |= newly
            if done.all():
                break
            prev = Tensor(mel_v[:, -1, :])

        mel_all = np.concatenate(mels, axis=1)
        lin_all = np.concatenate(lins, axis=1)
        att_all = np.stack(att_hist, axis=1)
        results = []
        for i in range(b):
            steps = int(halt_step[i])
            reason = "stop-token" if done[i] else "max-frames"
            results.append(SynthesisResult(
                mel=mel_all[i, : steps * r].copy(),
                linear=lin_all[i, : steps * r].copy(),
                attention=att_all[i, :steps].copy(),
                halt_reason=reason,
                n_frames=steps * r))
        return results

    def synthesize(self, tokens, max_frames, stop_threshold=None, rng=None):
        return self.synthesize_batch([tokens], max_frames, stop_threshold, rng)[0]
