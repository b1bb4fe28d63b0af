"""Losses, mutual-information bounds and the staged training procedures."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import adaptive
from . import channel as ch
from .codec import (CodecConfig, LinkBatch, apply_link, draw_batch_links, encode_sentences, forward_batch,
                    importance_graph, init_importance, init_params, jsc_decode_graph, jsc_encode_graph)
from .data import EncodedSet
from .evaluation import LinkConfig, accuracy
from .numerics import (NonFiniteError, ParameterSet, Tensor, absolute, as_tensor, log_softmax, softmax,
                       softmax_values, square, tsum, value_and_grad)

# ---------------------------------------------------------------------------
# losses


def _onehot(labels, n: int) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(labels))
    out = np.zeros((labels.size, n))
    out[np.arange(labels.size), labels] = 1.0
    return out


def ce_loss(logits: Tensor, labels) -> Tensor:
    """Mean of -log p(label)."""
    logits = as_tensor(logits)
    if logits.ndim == 1:
        logits = logits.reshape((1, -1))
    onehot = _onehot(labels, logits.shape[-1])
    return -tsum(log_softmax(logits) * onehot) * (1.0 / onehot.shape[0])


def ce_from_probs(probs, labels) -> float:
    """Cross-entropy of given probabilities, log clamped at 1e-12."""
    probs = np.atleast_2d(np.asarray(probs, float))
    picked = probs[np.arange(probs.shape[0]), np.atleast_1d(labels)]
    return float(-np.mean(np.log(np.maximum(picked, 1e-12))))


def acc_loss(logits: Tensor, labels) -> Tensor:
    """Soft accuracy surrogate: mean of -p(label)."""
    logits = as_tensor(logits)
    if logits.ndim == 1:
        logits = logits.reshape((1, -1))
    onehot = _onehot(labels, logits.shape[-1])
    return -tsum(softmax(logits) * onehot) * (1.0 / onehot.shape[0])


def mse_loss(z, zhat) -> Tensor:
    """Squared Euclidean error per example, averaged over the batch."""
    z, zhat = as_tensor(z), as_tensor(zhat)
    if z.shape != zhat.shape:
        raise ValueError("feature widths differ")
    d = zhat - z
    if d.ndim == 1:
        return tsum(square(d))
    return tsum(square(d)) * (1.0 / d.shape[0])


def mae_loss(a, ahat) -> Tensor:
    """Mean absolute error; the gradient-safe stand-in for E[ln|a - a_hat|]."""
    a, ahat = as_tensor(a), as_tensor(ahat)
    return tsum(absolute(ahat - a)) * (1.0 / max(ahat.value.size, 1))


mi_bound_regression_surrogate = mae_loss


def prop1_gradient_check(logits, label: int) -> dict:
    """Compare logit gradients of the soft-accuracy and CE losses.

    d(-p_a)/dl = p_a (p - onehot) and d(-log p_a)/dl = p - onehot, so the
    first is the second scaled by p_a; ``max_deviation`` measures how far
    the two analytic gradients are from that identity.
    """
    logits = np.asarray(logits, float)
    p = softmax_values(logits)
    onehot = _onehot([label], logits.size)[0]
    g_ce = p - onehot
    g_acc = p[label] * (p - onehot)
    return {
        "p_label": float(p[label]),
        "grad_ce": g_ce,
        "grad_acc": g_acc,
        "max_deviation": float(np.max(np.abs(g_acc - p[label] * g_ce))),
    }


def entropy(p) -> float:
    p = np.asarray(p, float).ravel()
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def mutual_information(joint) -> float:
    joint = np.asarray(joint, float)
    px = joint.sum(axis=1, keepdims=True)
    pa = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log(joint[nz] / (px @ pa)[nz])))


def mi_bound_classification(joint, predictor) -> tuple[float, float]:
    """(exact I(x; a), H(a) - E[CE(a, q(.|x))]) for an enumerable joint ``p(x, a)``.

    ``predictor[x]`` is the predicted answer distribution given ``x``.
    """
    joint = np.asarray(joint, float)
    predictor = np.asarray(predictor, float)
    if joint.ndim != 2 or np.any(joint < 0) or not math.isclose(joint.sum(), 1.0, abs_tol=1e-9):
        raise ValueError("joint must be a nonnegative matrix summing to 1")
    if predictor.shape != joint.shape or np.any(predictor < 0) or \
            not np.allclose(predictor.sum(axis=1), 1.0, atol=1e-9):
        raise ValueError("predictor rows must be distributions over answers")
    h_a = entropy(joint.sum(axis=0))
    nz = joint > 0
    cross = -np.sum(joint[nz] * np.log(np.maximum(predictor[nz], 1e-300)))
    return mutual_information(joint), float(h_a - cross)


# ---------------------------------------------------------------------------
# optimization


@dataclass(frozen=True)
class StageSettings:
    batch: int
    lr: float
    epochs: int


@dataclass(frozen=True)
class TrainProfile:
    semantic: StageSettings = StageSettings(200, 5e-4, 250)
    jsc: StageSettings = StageSettings(100, 1e-4, 50)
    whole: StageSettings = StageSettings(200, 5e-4, 30)
    importance: StageSettings = StageSettings(200, 5e-4, 10)
    consecutive: StageSettings = StageSettings(200, 1e-4, 50)
    snr_range: tuple = (-6.0, 18.0)
    min_budget_fraction: float = 0.5
    clip_norm: float = 1.0
    temperature: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainProfile":
        d = dict(d)
        for k in ("semantic", "jsc", "whole", "importance", "consecutive"):
            if k in d and isinstance(d[k], dict):
                d[k] = StageSettings(**d[k])
        if "snr_range" in d:
            d["snr_range"] = tuple(d["snr_range"])
        return cls(**d)


FULL_PROFILE = TrainProfile()
# 16 + 6 + 6 codec epochs; a few minutes on one CPU core at width 32
DESK_PROFILE = TrainProfile(
    semantic=StageSettings(32, 1e-3, 16),
    jsc=StageSettings(100, 1e-3, 6),
    whole=StageSettings(32, 5e-4, 6),
    importance=StageSettings(32, 1e-3, 3),
    consecutive=StageSettings(32, 5e-4, 4),
)


class Adam:
    """Adaptive-moment descent with global-norm gradient clipping."""

    def __init__(self, names, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, clip_norm: float | None = 1.0):
        self.names = list(names)
        self.lr, self.beta1, self.beta2, self.eps, self.clip_norm = lr, beta1, beta2, eps, clip_norm
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: ParameterSet, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        scale = 1.0
        if self.clip_norm:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for n in self.names:
            g = grads[n] * scale
            m = self.m.get(n, 0.0) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(n, 0.0) * self.beta2 + (1 - self.beta2) * g * g
            self.m[n], self.v[n] = m, v
            params[n] = params[n] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class EpochRecord:
    stage: str
    epoch: int
    loss: float
    val_accuracy: float

    def line(self) -> str:
        return f"stage={self.stage} epoch={self.epoch} loss={self.loss:.6f} val_accuracy={self.val_accuracy:.4f}"


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    path: str | None = None

    def __call__(self, rec: EpochRecord) -> None:
        self.records.append(rec)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(rec.line() + "\n")


def _run(params: ParameterSet, names: list[str], n_items: int, settings: StageSettings,
         rng: np.random.Generator, batch_loss: Callable, stage: str, log: Callable | None,
         validate: Callable | None, clip_norm: float) -> ParameterSet:
    opt = Adam(names, settings.lr, clip_norm=clip_norm)
    for epoch in range(settings.epochs):
        order = rng.permutation(n_items)
        losses = []
        for start in range(0, n_items, settings.batch):
            idx = order[start:start + settings.batch]
            fn = batch_loss(idx)
            try:
                value, grads = value_and_grad(fn, params, names)
            except NonFiniteError as err:
                raise TrainingDiverged(f"{stage} epoch {epoch + 1} batch {start // settings.batch}: {err}") from err
            opt.step(params, grads)
            losses.append(value)
        if log is not None:
            val = validate(params) if validate is not None else float("nan")
            log(EpochRecord(stage, epoch + 1, float(np.mean(losses)), val))
    return params


def _remap(data: EncodedSet, idx):
    """Restrict a batch to its distinct sentences; returns (tokens, context, question)."""
    ctx, q = data.context[idx], data.question[idx]
    used = np.unique(np.concatenate([ctx[ctx >= 0], q]))
    lookup = np.full(data.sentences.shape[0], -1)
    lookup[used] = np.arange(used.size)
    return data.sentences[used], np.where(ctx >= 0, lookup[np.maximum(ctx, 0)], -1), lookup[q]


def _snr_noise(rng, profile: TrainProfile) -> float:
    lo, hi = profile.snr_range
    return ch.snr_to_noise_var(rng.uniform(lo, hi))


def _validator(cfg, val, link, **kw):
    if val is None:
        return None
    return lambda P: accuracy(P, cfg, val, link, seed=12345, **kw)


def train_semantic_codec(params: ParameterSet, cfg: CodecConfig, data: EncodedSet, profile: TrainProfile,
                         rng: np.random.Generator, val: EncodedSet | None = None, log=None) -> ParameterSet:
    """Channel-free CE training of the semantic encoder and decoder."""
    names = params.names(["semantic_enc", "semantic_dec"])

    def batch_loss(idx):
        tokens, ctx, q = _remap(data, idx)

        def fn(T):
            table = encode_sentences(T, cfg, tokens)
            return ce_loss(forward_batch(T, cfg, table, ctx, q, use_jsc=False), data.answer[idx])
        return fn

    return _run(params, names, len(data), profile.semantic, rng, batch_loss, "semantic", log,
                _validator(cfg, val, None, use_jsc=False), profile.clip_norm)


def harvest_features(params: ParameterSet, cfg: CodecConfig, data: EncodedSet) -> np.ndarray:
    """Semantic features of every context and question occurrence in ``data``."""
    table = encode_sentences(params, cfg, data.sentences).value
    ids = np.concatenate([data.context[data.context >= 0], data.question])
    return table[ids]


def jsc_reconstruction(params: ParameterSet, cfg: CodecConfig, features: np.ndarray,
                       link: LinkBatch | None = None) -> np.ndarray:
    z = as_tensor(features)
    x = jsc_encode_graph(params, cfg, z)
    if link is not None:
        x = apply_link(x, link.gain[:, 0], link.offset[:, 0])
    return jsc_decode_graph(params, cfg, x).value


def train_jsc_codec(params: ParameterSet, cfg: CodecConfig, features: np.ndarray, profile: TrainProfile,
                    rng: np.random.Generator, kind: str = "awgn", log=None,
                    validate: Callable | None = None) -> ParameterSet:
    """MSE training of the JSC encoder/decoder over sampled channels and SNRs."""
    names = params.names(["jsc_enc", "jsc_dec"])

    def batch_loss(idx):
        z = features[idx]
        link = draw_batch_links(kind, (len(idx), 1, cfg.symbols), _snr_noise(rng, profile), 0.0, rng)

        def fn(T):
            x = apply_link(jsc_encode_graph(T, cfg, as_tensor(z)), link.gain[:, 0], link.offset[:, 0])
            return mse_loss(z, jsc_decode_graph(T, cfg, x))
        return fn

    return _run(params, names, len(features), profile.jsc, rng, batch_loss, "jsc", log, validate,
                profile.clip_norm)


def _whole_loss(params_names, cfg, data, profile, rng, kind, keep_fn=None):
    def batch_loss(idx):
        tokens, ctx, q = _remap(data, idx)
        link = draw_batch_links(kind, (len(idx), ctx.shape[1] + 1, cfg.symbols), _snr_noise(rng, profile), 0.0, rng)
        keep = keep_fn(len(idx)) if keep_fn else None

        def fn(T):
            table = encode_sentences(T, cfg, tokens)
            return ce_loss(forward_batch(T, cfg, table, ctx, q, link, True, keep), data.answer[idx])
        return fn
    return batch_loss


def train_whole(params: ParameterSet, cfg: CodecConfig, data: EncodedSet, profile: TrainProfile,
                rng: np.random.Generator, kind: str = "awgn", val: EncodedSet | None = None,
                log=None) -> ParameterSet:
    """End-to-end CE training of all four codec blocks through the sampled channel."""
    names = params.names(["semantic_enc", "jsc_enc", "jsc_dec", "semantic_dec"])
    return _run(params, names, len(data), profile.whole, rng,
                _whole_loss(names, cfg, data, profile, rng, kind), "whole", log,
                _validator(cfg, val, LinkConfig(kind, 18.0)), profile.clip_norm)


def budget_range(cfg: CodecConfig, profile: TrainProfile) -> tuple[int, int]:
    return max(1, int(round(cfg.symbols * profile.min_budget_fraction))), cfg.symbols


def train_consecutive(params: ParameterSet, cfg: CodecConfig, data: EncodedSet, profile: TrainProfile,
                      rng: np.random.Generator, kind: str = "awgn", val: EncodedSet | None = None,
                      log=None) -> ParameterSet:
    """Whole-network retraining with a prefix mask whose length is drawn per batch."""
    names = params.names(["semantic_enc", "jsc_enc", "jsc_dec", "semantic_dec"])
    lo, hi = budget_range(cfg, profile)
    keep_fn = lambda b: adaptive.prefix_mask(cfg.symbols, rng.integers(lo, hi + 1))  # noqa: E731
    validate = None
    if val is not None:
        validate = lambda P: accuracy(P, cfg, val, LinkConfig(kind, 18.0), seed=12345,  # noqa: E731
                                      strategy="consecutive", budget=lo)
    return _run(params, names, len(data), profile.consecutive, rng,
                _whole_loss(names, cfg, data, profile, rng, kind, keep_fn), "consecutive", log,
                validate, profile.clip_norm)


def train_importance(codec: ParameterSet, importance: ParameterSet, cfg: CodecConfig, data: EncodedSet,
                     profile: TrainProfile, rng: np.random.Generator, kind: str = "awgn",
                     val: EncodedSet | None = None, log=None) -> ParameterSet:
    """Train the importance scorer against a frozen codec, bridging the top-k mask with SoftKMax."""
    merged = codec.copy()
    merged.merge(importance)
    names = importance.names()
    lo, hi = budget_range(cfg, profile)
    table = encode_sentences(codec, cfg, data.sentences).value

    def batch_loss(idx):
        ctx, q = data.context[idx], data.question[idx]
        link = draw_batch_links(kind, (len(idx), ctx.shape[1] + 1, cfg.symbols), _snr_noise(rng, profile), 0.0, rng)
        budget = int(rng.integers(lo, hi + 1))

        def fn(T):
            keep = lambda xc: adaptive.soft_k_max(importance_graph(T, cfg, xc), budget, profile.temperature)  # noqa: E731
            return ce_loss(forward_batch(T, cfg, as_tensor(table), ctx, q, link, True, keep), data.answer[idx])
        return fn

    validate = None
    if val is not None:
        def validate(P):
            imp = ParameterSet()
            for n in names:
                imp.add(n, P[n], "importance")
            return accuracy(codec, cfg, val, LinkConfig(kind, 18.0), seed=12345, strategy="importance",
                            budget=lo, importance=imp)
    _run(merged, names, len(data), profile.importance, rng, batch_loss, "importance", log, validate,
         profile.clip_norm)
    out = ParameterSet()
    for n in names:
        out.add(n, merged[n], "importance")
    return out


# ---------------------------------------------------------------------------
# model-noise estimation


@dataclass(frozen=True)
class NoiseEstimate:
    peak: float
    variance: float

    @property
    def peak_power(self) -> float:
        return self.peak ** 2


def noise_from_ensemble(transmits, normalize: bool = True) -> NoiseEstimate:
    """Model-noise statistics from ``[models, probes, L]`` complex transmit vectors.

    The across-model mean per element plays the role of the latent codeword;
    the across-model spread is the model noise (complex variance).
    """
    x = np.asarray(transmits)
    if x.ndim != 3 or x.shape[0] < 2:
        raise ValueError("need transmit vectors from at least two models")
    if normalize:
        power = np.mean(np.abs(x) ** 2, axis=(1, 2), keepdims=True)
        x = x / np.sqrt(np.where(power > 0, power, 1.0))
    # spread is measured on offsets from the first model so identical models give exactly zero
    d = x - x[0]
    spread = d - d.mean(axis=0)
    var = np.mean(np.sum(np.abs(spread) ** 2, axis=0) / (x.shape[0] - 1))
    return NoiseEstimate(float(np.max(np.abs(x.mean(axis=0)))), float(var))


def estimate_model_noise(models: list, tokens: np.ndarray, normalize: bool = True) -> NoiseEstimate:
    """``models`` is a list of (ParameterSet, CodecConfig) sharing the symbol length."""
    if len(models) < 2:
        raise ValueError("need at least two trained models")
    lengths = {cfg.symbols for _, cfg in models}
    if len(lengths) != 1:
        raise ValueError("models must share the transmit length")
    stack = []
    for P, cfg in models:
        z = encode_sentences(P, cfg, tokens)
        stack.append(ch.pairs_to_complex(jsc_encode_graph(P, cfg, z).value))
    return noise_from_ensemble(np.stack(stack), normalize)


def train_pipeline(cfg: CodecConfig, train: EncodedSet, profile: TrainProfile, seed: int = 0,
                   kind: str = "awgn", val: EncodedSet | None = None, log=None,
                   stages=("semantic", "jsc", "whole", "importance", "consecutive")) -> dict:
    """Run the requested stages in order; returns the resulting parameter sets by name."""
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed)
    out = {}
    if "semantic" in stages:
        params = train_semantic_codec(params, cfg, train, profile, rng, val, log)
        out["separate_semantic"] = params.copy()
    if "jsc" in stages:
        feats = harvest_features(params, cfg, train)
        params = train_jsc_codec(params, cfg, feats, profile, rng, kind, log)
        out["separate"] = params.copy()
    if "whole" in stages:
        params = train_whole(params, cfg, train, profile, rng, kind, val, log)
    params.round_to_single()
    out["codec"] = params
    if "importance" in stages:
        imp = train_importance(params, init_importance(cfg, seed + 1), cfg, train, profile, rng, kind, val, log)
        imp.round_to_single()
        out["importance"] = imp
    if "consecutive" in stages:
        cons = train_consecutive(params.copy(), cfg, train, profile, rng, kind, val, log)
        cons.round_to_single()
        out["consecutive"] = cons
    return out
