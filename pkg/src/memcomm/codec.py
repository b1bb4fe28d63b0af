"""Semantic and JSC codecs, wired transmitter -> channel -> memory -> answer head.

Two entry styles share the same layer code:

* per-sentence functions (``semantic_encode``, ``jsc_encode``, ...) and
  :func:`full_forward`, which walks one episode through the queue exactly
  as a receiver would;
* :func:`forward_batch`, a batched graph over a table of distinct
  sentences used for training and bulk evaluation.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import channel as ch
from . import memory as mem
from .numerics import (ParameterSet, ShapeError, Tensor, as_tensor, attention, concat, dense_apply,
                       glorot, layer_norm, relu, sqrt, square, tsum)


@dataclass(frozen=True)
class CodecConfig:
    vocab_size: int
    n_answers: int
    width: int = 128
    feature_width: int | None = None
    symbols: int = 32
    encoder_steps: int = 3
    decoder_steps: int = 6
    heads: int = 4
    memory: int = 10
    ffn_width: int | None = None
    jsc_hidden: int | None = None
    importance_width: int = 64
    importance_heads: int = 4

    def __post_init__(self):
        if self.feature_width is None:
            object.__setattr__(self, "feature_width", self.width)
        if self.ffn_width is None:
            object.__setattr__(self, "ffn_width", 2 * self.width)
        if self.jsc_hidden is None:
            object.__setattr__(self, "jsc_hidden", 2 * self.feature_width)
        for name in ("vocab_size", "n_answers", "width", "symbols", "encoder_steps",
                     "decoder_steps", "heads", "memory"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.width % self.heads or self.importance_width % self.importance_heads:
            raise ValueError("widths must be divisible by head counts")
        if self.feature_width % 2:
            raise ValueError("feature width must be even for the temporal code")

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoid(n: int, width: int) -> np.ndarray:
    return mem.temporal_matrix(n, width)


# ---------------------------------------------------------------------------
# parameters


def _add_layer(P: ParameterSet, prefix: str, d: int, ff: int, tag: str, rng) -> None:
    for w in ("wq", "wk", "wv", "wo"):
        P.add(f"{prefix}.{w}", glorot(rng, (d, d)), tag)
    P.add(f"{prefix}.ln1_g", np.ones(d), tag)
    P.add(f"{prefix}.ln1_b", np.zeros(d), tag)
    P.add(f"{prefix}.ff1_w", glorot(rng, (ff, d)), tag)
    P.add(f"{prefix}.ff1_b", np.zeros(ff), tag)
    P.add(f"{prefix}.ff2_w", glorot(rng, (d, ff)), tag)
    P.add(f"{prefix}.ff2_b", np.zeros(d), tag)
    P.add(f"{prefix}.ln2_g", np.ones(d), tag)
    P.add(f"{prefix}.ln2_b", np.zeros(d), tag)


def _add_dense(P: ParameterSet, name: str, d_out: int, d_in: int, tag: str, rng) -> None:
    P.add(f"{name}_w", glorot(rng, (d_out, d_in)), tag)
    P.add(f"{name}_b", np.zeros(d_out), tag)


def init_params(cfg: CodecConfig, seed: int = 0) -> ParameterSet:
    rng = np.random.default_rng(seed)
    d, n = cfg.width, cfg.feature_width
    P = ParameterSet()
    P.add("enc.emb", glorot(rng, (cfg.vocab_size, d)), "semantic_enc")
    _add_layer(P, "enc.ut", d, cfg.ffn_width, "semantic_enc", rng)
    if n != d:
        _add_dense(P, "enc.proj", n, d, "semantic_enc", rng)
    _add_dense(P, "jsce.l1", cfg.jsc_hidden, n, "jsc_enc", rng)
    _add_dense(P, "jsce.l2", 2 * cfg.symbols, cfg.jsc_hidden, "jsc_enc", rng)
    _add_dense(P, "jscd.l1", cfg.jsc_hidden, 2 * cfg.symbols, "jsc_dec", rng)
    _add_dense(P, "jscd.l2", n, cfg.jsc_hidden, "jsc_dec", rng)
    P.add("dec.in_g", np.ones(n), "semantic_dec")
    P.add("dec.in_b", np.zeros(n), "semantic_dec")
    if n != d:
        _add_dense(P, "dec.proj", d, n, "semantic_dec", rng)
    _add_layer(P, "dec.ut", d, cfg.ffn_width, "semantic_dec", rng)
    _add_dense(P, "dec.head", cfg.n_answers, d, "semantic_dec", rng)
    return P


def init_importance(cfg: CodecConfig, seed: int = 0) -> ParameterSet:
    rng = np.random.default_rng(seed)
    w = cfg.importance_width
    P = ParameterSet()
    _add_dense(P, "imp.in", w, 3, "importance", rng)
    _add_layer(P, "imp.tf", w, 2 * w, "importance", rng)
    _add_dense(P, "imp.out", 1, w, "importance", rng)
    return P


# ---------------------------------------------------------------------------
# layers


def dense(P, name: str, x) -> Tensor:
    return dense_apply(x, P[f"{name}_w"], P[f"{name}_b"])


def encoder_layer(P, prefix: str, x: Tensor, heads: int, key_mask=None) -> Tensor:
    """Post-norm transformer encoder layer."""
    lin = lambda w: x @ P[f"{prefix}.{w}"].T  # noqa: E731
    a = attention(lin("wq"), lin("wk"), lin("wv"), heads, mix=P[f"{prefix}.wo"], key_mask=key_mask)
    h = layer_norm(x + a, P[f"{prefix}.ln1_g"], P[f"{prefix}.ln1_b"])
    f = dense_apply(relu(dense_apply(h, P[f"{prefix}.ff1_w"], P[f"{prefix}.ff1_b"])),
                    P[f"{prefix}.ff2_w"], P[f"{prefix}.ff2_b"])
    return layer_norm(h + f, P[f"{prefix}.ln2_g"], P[f"{prefix}.ln2_b"])


def universal(P, prefix: str, x: Tensor, steps: int, heads: int, key_mask=None) -> Tensor:
    """One shared layer applied ``steps`` times with a per-step time signal."""
    d = x.shape[-1]
    step_codes = sinusoid(steps, d)
    for t in range(steps):
        x = encoder_layer(P, prefix, x + step_codes[t], heads, key_mask)
    return x


def encode_sentences(P, cfg: CodecConfig, tokens: np.ndarray) -> Tensor:
    """Token-id matrix ``[S, len]`` (0 = padding) -> sentence features ``[S, N]``."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    present = tokens != 0
    if not present.any(axis=1).all():
        raise ValueError("empty sentence after padding removal")
    if tokens.max() >= cfg.vocab_size or tokens.min() < 0:
        raise ValueError("unknown token id")
    emb = as_tensor(P["enc.emb"])[tokens] * math.sqrt(cfg.width)
    x = emb + sinusoid(tokens.shape[1], cfg.width)
    x = universal(P, "enc.ut", x, cfg.encoder_steps, cfg.heads, key_mask=present)
    z = tsum(x * present[..., None].astype(np.float64), axis=1)
    if cfg.feature_width != cfg.width:
        z = dense(P, "enc.proj", z)
    return z


def jsc_encode_graph(P, cfg: CodecConfig, z: Tensor) -> Tensor:
    """Features ``[..., N]`` -> power-normalized symbols as real pairs ``[..., L, 2]``."""
    h = relu(dense(P, "jsce.l1", z))
    x = dense(P, "jsce.l2", h)
    x = x.reshape(x.shape[:-1] + (cfg.symbols, 2))
    power = tsum(tsum(square(x), axis=-1), axis=-1, keepdims=True)[..., None]
    return x * math.sqrt(cfg.symbols) / sqrt(power)


def jsc_decode_graph(P, cfg: CodecConfig, xhat: Tensor) -> Tensor:
    flat = xhat.reshape(xhat.shape[:-2] + (2 * cfg.symbols,))
    return dense(P, "jscd.l2", relu(dense(P, "jscd.l1", flat)))


def apply_link(x: Tensor, gain: np.ndarray, offset: np.ndarray, keep=None) -> Tensor:
    """Detected symbols ``keep * (gain * x + offset)`` in real-pair form.

    ``gain``/``offset`` are complex arrays broadcastable to ``x.shape[:-1]``;
    ``keep`` is a 0/1 array or Tensor of the same shape (masked symbols are
    never sent and the receiver pads them with zeros).
    """
    g = np.asarray(gain, dtype=np.complex128)
    rot = np.stack([np.stack([g.real, -g.imag], -1), np.stack([g.imag, g.real], -1)], -2)
    y = (as_tensor(rot) @ x[..., None]).reshape(x.shape)
    y = y + ch.complex_to_pairs(np.broadcast_to(offset, x.shape[:-1]))
    if keep is not None:
        keep = keep if isinstance(keep, Tensor) else as_tensor(np.asarray(keep, dtype=np.float64))
        y = y * keep[..., None]
    return y


def receive_features(P, z) -> Tensor:
    """Rescale recovered features before they are queued or decoded.

    Summed features grow with sentence length and would otherwise dwarf the
    slot codes added to the queue.
    """
    return layer_norm(z, P["dec.in_g"], P["dec.in_b"])


def decode_answer(P, cfg: CodecConfig, zq: Tensor, memory: Tensor, temporal: bool = True) -> Tensor:
    """Received question feature ``[B, N]`` and memory ``[B, T, N]`` -> answer logits ``[B, A]``."""
    if zq.shape[-1] != memory.shape[-1] or memory.shape[-1] != cfg.feature_width:
        raise ShapeError("question/memory width mismatch")
    if temporal:
        memory = memory + sinusoid(memory.shape[-2], cfg.feature_width)
    seq = concat([zq[:, None, :], memory], axis=1)
    if cfg.feature_width != cfg.width:
        seq = dense(P, "dec.proj", seq)
    out = universal(P, "dec.ut", seq, cfg.decoder_steps, cfg.heads)
    return dense(P, "dec.head", out[:, 0, :])


def importance_graph(P, cfg: CodecConfig, x: Tensor) -> Tensor:
    """Symbols ``[..., L, 2]`` -> one importance score per complex element ``[..., L]``."""
    lead = x.shape[:-2]
    x = x.reshape((-1, cfg.symbols, 2))
    # per-element energy rides along with the real and imaginary parts
    feats = concat([x, tsum(square(x), axis=-1, keepdims=True)], axis=-1)
    h = dense(P, "imp.in", feats) + sinusoid(cfg.symbols, cfg.importance_width)
    h = encoder_layer(P, "imp.tf", h, cfg.importance_heads)
    return dense(P, "imp.out", h).reshape(lead + (cfg.symbols,))


# ---------------------------------------------------------------------------
# batched pipeline


@dataclass
class LinkBatch:
    """Per-slot complex gain/offset for ``[B, T+1, L]`` (last slot = question)."""

    gain: np.ndarray
    offset: np.ndarray

    @classmethod
    def identity(cls, batch: int, slots: int, symbols: int) -> "LinkBatch":
        return cls(np.ones((batch, slots, symbols), complex), np.zeros((batch, slots, symbols), complex))


def draw_batch_links(kind: str, shape: tuple, noise_var, csi_error: float,
                     rng: np.random.Generator, rician_r: float = ch.DEFAULT_RICIAN_R) -> LinkBatch:
    """Vectorized block-fading draws; ``noise_var`` may be an array over the batch axis."""
    b, s, length = shape
    if kind == "awgn":
        h = np.ones(shape, complex)
    elif kind == "rayleigh":
        h = ch.complex_normal(rng, shape)
    elif kind == "rician":
        mu, sigma = ch.rician_moments(rician_r)
        h = mu + ch.complex_normal(rng, (b, s, length), sigma ** 2)
    else:
        raise ch.ChannelError(f"unknown channel kind {kind!r}")
    nv = np.broadcast_to(np.asarray(noise_var, dtype=float).reshape(-1, 1, 1), shape)
    noise = ch.complex_normal(rng, shape, 1.0) * np.sqrt(nv)
    h_est = h + ch.complex_normal(rng, shape, csi_error) if csi_error > 0 else h
    denom = (h_est * np.conj(h_est)).real
    return LinkBatch(np.conj(h_est) * h / denom, np.conj(h_est) * noise / denom)


def forward_batch(P, cfg: CodecConfig, table: Tensor, context: np.ndarray, question: np.ndarray,
                  link: LinkBatch | None = None, use_jsc: bool = True, keep=None,
                  zero_memory: bool = False, temporal: bool = True) -> Tensor:
    """Answer logits for a batch.

    ``table`` holds the semantic features of every distinct sentence and
    ``context``/``question`` index into it (-1 marks an empty queue slot).
    ``keep`` is an optional ``[B, T, L]`` context mask, or a callable that
    builds one from the context symbols ``[B, T, L, 2]``.
    """
    context = np.asarray(context)
    b, t = context.shape
    occupied = (context >= 0).astype(np.float64)[..., None]
    idx = np.concatenate([np.where(context >= 0, context, 0), np.asarray(question)[:, None]], axis=1)
    z = table[idx]
    if use_jsc:
        x = jsc_encode_graph(P, cfg, z)
        if link is None:
            link = LinkBatch.identity(b, t + 1, cfg.symbols)
        if callable(keep):
            keep = keep(x[:, :t])
        if keep is not None:
            ones = np.ones((b, 1, cfg.symbols))
            if isinstance(keep, Tensor):
                keep = concat([keep, ones], axis=1)
            else:
                keep = np.concatenate([np.broadcast_to(keep, (b, t, cfg.symbols)), ones], 1)
        xhat = apply_link(x, link.gain, link.offset, keep)
        z = jsc_decode_graph(P, cfg, xhat)
    z = receive_features(P, z)
    zq = z[:, t, :]
    memory = z[:, :t, :] * occupied
    if zero_memory:
        memory = memory * 0.0
        temporal = False
    return decode_answer(P, cfg, zq, memory, temporal)


# ---------------------------------------------------------------------------
# per-sentence receiver path


def semantic_encode(tokens, P, cfg: CodecConfig) -> np.ndarray:
    return encode_sentences(P, cfg, np.asarray(tokens)[None, :]).value[0]


def jsc_encode(z, P, cfg: CodecConfig) -> np.ndarray:
    pairs = jsc_encode_graph(P, cfg, as_tensor(np.asarray(z, float)[None, :])).value[0]
    return ch.pairs_to_complex(pairs)


def jsc_decode(xhat, P, cfg: CodecConfig) -> np.ndarray:
    pairs = ch.complex_to_pairs(np.asarray(xhat, dtype=complex))[None]
    return jsc_decode_graph(P, cfg, as_tensor(pairs)).value[0]


def semantic_decode(zq, M, P, cfg: CodecConfig, temporal: bool = False) -> np.ndarray:
    """Logits from a received question feature and an already temporally-coded memory ``M``.

    Both inputs are expected to have passed through ``receive_features``.
    """
    zq = np.asarray(zq, float)
    M = np.asarray(M, float)
    if zq.shape != (cfg.feature_width,) or M.shape[-1] != cfg.feature_width:
        raise ShapeError("question/memory width mismatch")
    return decode_answer(P, cfg, as_tensor(zq[None]), as_tensor(M[None]), temporal).value[0]


def predict(logits) -> int:
    """Arg-max with ties going to the lowest index."""
    logits = np.asarray(logits)
    if logits.size == 0:
        raise ValueError("empty logits")
    return int(np.argmax(logits))


def full_forward(context: list, question, P, cfg: CodecConfig, kind: str = "awgn",
                 noise_var: float = 0.0, csi_error: float = 0.0, seed: int = 0, episode: int = 0,
                 rician_r: float = ch.DEFAULT_RICIAN_R, masks: list | None = None,
                 channel: bool = True) -> np.ndarray:
    """Memory shaping then task execution for one episode of token-id sentences.

    Slot ``k`` (context k, question = len(context)) draws its channel from
    ``stream(seed, episode, k)``; ``masks[k]`` optionally keeps a subset of
    context symbols. With ``channel=False`` the JSC output is decoded directly.
    """
    if not context:
        raise ValueError("episode needs at least one context sentence")

    def send(tokens, slot, keep=None):
        x = jsc_encode(semantic_encode(tokens, P, cfg), P, cfg)
        if channel:
            link = ch.draw_link(kind, cfg.symbols, noise_var, csi_error, ch.stream(seed, episode, slot), rician_r)
            xhat = ch.detect(ch.transmit(x, link.h, noise_var, noise=link.noise), link.h_est)
        else:
            xhat = x
        if keep is not None:
            xhat = xhat * keep
        return receive_features(P, jsc_decode(xhat, P, cfg)).value

    q = mem.queue_init(cfg.memory, cfg.feature_width)
    for k, sentence in enumerate(context):
        q = mem.queue_push(q, send(sentence, k, None if masks is None else masks[k]))
    M = mem.temporal_code(q)
    zq = send(question, len(context))
    return semantic_decode(zq, M, P, cfg)
