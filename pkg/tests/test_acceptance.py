"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected in ``REPORT`` and repeated in the pytest
terminal summary (see conftest.py). The two training criteria share one
desk-profile training run, which takes a few minutes on one core.
"""
import time

import numpy as np
import pytest
from scipy import stats

from memcomm import adaptive as ad
from memcomm import channel as ch
from memcomm import codec as C
from memcomm import data as D
from memcomm import evaluation as EV
from memcomm import harness as H
from memcomm import memory as mem
from memcomm import numerics as nx
from memcomm import training as TR

REPORT: list[str] = []


def check(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    REPORT.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# 1-2: symbol accounting


def test_criterion_01_dynamic_lengths():
    budget = ad.LinkBudget(16, 1.0, 1.44, 0.0, 32)
    rows = H.plan_rows(H.COARSE_SNRS, budget)
    got = [r["planned_length"] for r in rows]
    runs = []
    for _ in range(200):
        t0 = time.perf_counter()
        H.plan_rows(H.COARSE_SNRS, budget)
        runs.append(time.perf_counter() - t0)
    ms = 1e3 * float(np.median(runs))
    ok = got[:3] == [32, 25, 18] and abs(got[3] - 16) <= 1 and got[4] == 16 and ms < 1.0
    check(1, "planned lengths at -6..18 dB", ok, f"{got}, {ms:.3f} ms per 5-point plan")


def test_criterion_02_amc_symbols():
    got = [H.modulation_symbols(760, b) for b in (1, 2, 3, 4)]
    check(2, "AMC symbols for 760 coded bits", got == [760, 380, 253, 190], str(got))


# ---------------------------------------------------------------------------
# 3-6: numerical identities


def test_criterion_03_loopback_identity():
    rng = np.random.default_rng(30)
    worst = {}
    for kind in ch.KINDS:
        x = ch.complex_normal(rng, (10_000, 16))
        h = ch.sample_channel(kind, x.size, 2.0, rng).h.reshape(x.shape)
        worst[kind] = float(np.max(np.abs(ch.detect(ch.transmit(x, h, 0.0), h) - x)))
    ok = max(worst.values()) <= 1e-12
    check(3, "noiseless perfect-CSI loopback", ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


def _params(rng, **shapes):
    P = nx.ParameterSet()
    for name, shape in shapes.items():
        P.add(name, rng.normal(size=shape) + 0.1, "semantic_enc")
    return P


def _projected(fn, shape_seed):
    proj = {}

    def loss(T):
        out = fn(T)
        if "p" not in proj:
            proj["p"] = np.random.default_rng(shape_seed).normal(size=out.shape)
        return (out * proj["p"]).sum()
    return loss


def _gradient_cases():
    away = lambda t: t + nx.as_tensor(np.sign(t.value) * 0.2)  # noqa: E731  keeps relu/abs off their kinks
    unary = {
        "add": lambda T: T["a"] + T["b"], "mul": lambda T: T["a"] * T["b"],
        "div": lambda T: T["a"] / (nx.square(T["b"]) + 1.0), "neg": lambda T: -T["a"],
        "matmul": lambda T: T["a"] @ nx.transpose(T["b"]), "exp": lambda T: nx.exp(T["a"]),
        "log": lambda T: nx.log(nx.square(T["a"]) + 1.0), "sqrt": lambda T: nx.sqrt(nx.square(T["a"]) + 1.0),
        "square": lambda T: nx.square(T["a"]), "abs": lambda T: nx.absolute(away(T["a"])),
        "relu": lambda T: nx.relu(away(T["a"])), "tanh": lambda T: nx.tanh(T["a"]),
        "sigmoid": lambda T: nx.sigmoid(T["a"]), "softmax": lambda T: nx.softmax(T["a"], axis=-1),
        "log_softmax": lambda T: nx.log_softmax(T["a"], axis=0), "sum": lambda T: nx.tsum(T["a"], axis=1),
        "mean": lambda T: nx.mean(T["a"], axis=0, keepdims=True), "reshape": lambda T: nx.reshape(T["a"], (-1,)),
        "transpose": lambda T: nx.transpose(T["a"]), "swapaxes": lambda T: nx.swapaxes(T["a"], 0, 1),
        "index": lambda T: T["a"][np.array([0, 2, 2]), 1:], "concat": lambda T: nx.concat([T["a"], T["b"]], 1),
        "layer_norm": lambda T: nx.layer_norm(T["a"], T["g"], T["s"]),
        "dense": lambda T: nx.dense_apply(T["a"], T["w"], T["s"]),
    }
    for name, fn in unary.items():
        yield name, fn, dict(a=(3, 4), b=(3, 4), g=(4,), s=(4,), w=(4, 4))
    mask = np.ones((2, 5))
    mask[1, 3:] = 0
    yield ("attention", lambda T: nx.attention(T["q"], T["k"], T["v"], 2, T["mix"], mask),
           dict(q=(2, 3, 8), k=(2, 5, 8), v=(2, 5, 8), mix=(8, 8)))


def _end_to_end_error() -> float:
    eps = D.parse_babi(D.generate_task1(4, 1))
    vocab = D.build_vocab(eps)
    cfg = C.CodecConfig(vocab_size=vocab.size, n_answers=vocab.n_answers, width=8, symbols=4, encoder_steps=2,
                        decoder_steps=2, heads=2, memory=3, importance_width=4, importance_heads=2)
    data = D.encode_episodes(eps, vocab, cfg.memory)
    P = C.init_params(cfg, 6)
    idx = np.arange(4)
    ctx, q = data.context[idx], data.question[idx]
    link = C.draw_batch_links("rician", (4, cfg.memory + 1, cfg.symbols), 0.3, 0.05, np.random.default_rng(0))

    def loss(T):
        table = C.encode_sentences(T, cfg, data.sentences)
        return TR.ce_loss(C.forward_batch(T, cfg, table, ctx, q, link, True), data.answer[idx])

    return nx.finite_diff_check(loss, P, 1e-5, max_per_param=8, rng=np.random.default_rng(1))


def test_criterion_04_gradient_suite():
    errors = {}
    for i, (name, fn, shapes) in enumerate(_gradient_cases()):
        P = _params(np.random.default_rng(40 + i), **shapes)
        errors[name] = nx.finite_diff_check(_projected(fn, 400 + i), P, 1e-5)
    errors["end-to-end"] = _end_to_end_error()
    worst = max(errors, key=errors.get)
    ok = errors[worst] <= 1e-4
    check(4, "finite-difference gradients", ok, f"{len(errors)} checks, worst {worst} at {errors[worst]:.2e}")


def test_criterion_05_mi_bound():
    rng = np.random.default_rng(50)
    slack, gap = np.inf, 0.0
    for _ in range(100):
        nx_, na = rng.integers(1, 7), rng.integers(1, 5)
        joint = rng.random((nx_, na)) ** 3
        joint /= joint.sum()
        px = joint.sum(axis=1, keepdims=True)
        posterior = np.where(px > 0, joint / px, 1.0 / na)
        exact, tight = TR.mi_bound_classification(joint, posterior)
        gap = max(gap, abs(exact - tight))
        other = rng.dirichlet(np.ones(na), size=nx_)
        exact, bound = TR.mi_bound_classification(joint, other)
        slack = min(slack, exact - bound)
    ok = slack >= -1e-12 and gap <= 1e-9
    check(5, "classification bound below exact MI", ok, f"min slack {slack:.3e}, tight gap {gap:.1e}")


def test_criterion_06_prop1_identity():
    rng = np.random.default_rng(60)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 12))
        logits = rng.normal(0, 3, n)
        label = int(rng.integers(n))
        res = TR.prop1_gradient_check(logits, label)
        P = nx.ParameterSet()
        P.add("l", logits, "semantic_dec")
        g_acc = nx.grad(lambda T: TR.acc_loss(nx.reshape(T["l"], (1, -1)), [label]), P)["l"]
        g_ce = nx.grad(lambda T: TR.ce_loss(nx.reshape(T["l"], (1, -1)), [label]), P)["l"]
        worst = max(worst, res["max_deviation"], float(np.max(np.abs(g_acc - res["p_label"] * g_ce))))
    check(6, "accuracy-loss gradient equals p times CE gradient", worst <= 1e-9, f"max deviation {worst:.1e}")


# ---------------------------------------------------------------------------
# 7-8: desk-scale training trends


@pytest.fixture(scope="module")
def desk_run():
    cfg = H.ExperimentConfig(train_seed=0)
    corpus = H.build_corpus(cfg)
    codec = H.codec_config(cfg, corpus.vocab)
    profile = cfg.train_profile()
    marks = {}

    def log(rec):
        marks[rec.stage] = time.process_time()

    start = time.process_time()
    out = TR.train_pipeline(codec, corpus.train, profile, cfg.train_seed, "awgn", corpus.validation, log)
    return dict(cfg=cfg, corpus=corpus, codec=codec, profile=profile, out=out,
                cpu_minutes=(marks["whole"] - start) / 60.0)


def test_criterion_07_memory_gap(desk_run):
    codec, profile, out = desk_run["codec"], desk_run["profile"], desk_run["out"]
    va, link = desk_run["corpus"].validation, EV.LinkConfig("awgn", 18.0)
    with_mem = EV.accuracy(out["codec"], codec, va, link, 0)
    without = EV.accuracy(out["codec"], codec, va, link, 0, zero_memory=True)
    epochs = profile.semantic.epochs + profile.jsc.epochs + profile.whole.epochs
    scale_ok = codec.width <= 64 and (codec.encoder_steps, codec.decoder_steps) == (2, 2) and epochs <= 30
    ok = with_mem >= 0.80 and without <= 0.50 and scale_ok and desk_run["cpu_minutes"] <= 10.0
    check(7, "memory vs zero-memory at 18 dB AWGN", ok,
          f"{with_mem:.3f} vs {without:.3f}; width {codec.width}, {epochs} epochs, "
          f"{desk_run['cpu_minutes']:.1f} CPU min")


def test_criterion_08_mask_trends(desk_run):
    codec, out = desk_run["codec"], desk_run["out"]
    va, link = desk_run["corpus"].validation, EV.LinkConfig("awgn", 18.0)
    half = codec.symbols // 2
    acc = {k: [] for k in ("none", "importance", "consecutive", "random")}
    for seed in range(5):
        acc["none"].append(EV.accuracy(out["codec"], codec, va, link, seed))
        acc["importance"].append(EV.accuracy(out["codec"], codec, va, link, seed, strategy="importance",
                                             budget=half, importance=out["importance"]))
        acc["consecutive"].append(EV.accuracy(out["consecutive"], codec, va, link, seed,
                                              strategy="consecutive", budget=half))
        acc["random"].append(EV.accuracy(out["codec"], codec, va, link, seed, strategy="random", budget=half))
    m = {k: float(np.mean(v)) for k, v in acc.items()}
    p = float(stats.ttest_rel(acc["importance"], acc["random"], alternative="greater").pvalue)
    ok = (m["none"] - m["importance"] <= 0.05 and m["none"] - m["consecutive"] <= 0.05
          and m["importance"] > m["random"] and p < 0.05)
    check(8, f"masks at {half}/{codec.symbols} symbols, 18 dB", ok,
          ", ".join(f"{k} {v:.3f}" for k, v in m.items()) + f"; importance>random p={p:.1e}")


# ---------------------------------------------------------------------------
# 9-10: channel statistics and memory invariants


def test_criterion_09_rician_statistics():
    h = ch.sample_channel("rician", 100_000, 2.0, np.random.default_rng(90)).h
    mean, var = abs(np.mean(h)), float(np.var(h))
    want_mean, want_var = np.sqrt(2 / 3), 1 / 3
    ok = abs(mean / want_mean - 1) <= 0.01 and abs(var / want_var - 1) <= 0.01
    check(9, "Rician r=2 moments over 1e5 draws", ok, f"mean {mean:.4f}, variance {var:.4f}")


def test_criterion_10_memory_invariants():
    rng = np.random.default_rng(100)
    queue_ok = True
    for _ in range(200):
        cap = int(rng.integers(1, 8))
        seq = rng.normal(size=(int(rng.integers(0, 20)), 3))
        q = mem.queue_init(cap, 3)
        for row in seq:
            q = mem.queue_push(q, row)
        tail = seq[len(seq) - min(cap, len(seq)):]
        want = np.vstack([np.zeros((cap - len(tail), 3)), tail])
        queue_ok &= bool(np.array_equal(q.slots, want))
    T = mem.temporal_matrix(64, 32)
    gram = T @ T.T
    offset = max(float(np.ptp(np.diagonal(gram, d))) for d in range(-63, 64))
    frame_ok = True
    for _ in range(200):
        n = int(rng.integers(1, 70))
        x = (rng.normal(size=n) + 1j * rng.normal(size=n)).astype(np.complex64).astype(np.complex128)
        mask = rng.random(n) < 0.5
        frame = ad.MaskedFrame.from_bytes(ad.pack_masked(x, mask).to_bytes())
        frame_ok &= bool(np.array_equal(frame.bitmap, mask) and np.array_equal(ad.unpack_masked(frame),
                                                                              np.where(mask, x, 0)))
    ok = queue_ok and offset <= 1e-9 and frame_ok
    check(10, "queue, temporal code and frame roundtrip", ok,
          f"queue {'exact' if queue_ok else 'mismatch'}, offset spread {offset:.1e}, "
          f"frames {'exact' if frame_ok else 'mismatch'}")
