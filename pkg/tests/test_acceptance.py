"""Acceptance criteria; each test prints one PASS/FAIL line in the terminal summary."""

import time

import numpy as np
from test_autodiff import OPS, _case, _weighted

from sparsecast import autodiff as ad
from sparsecast.attention import AttentionConfig, OpCounters, efficient_attention, full_attention, n_top
from sparsecast.attention import prob_sparse_attention
from sparsecast.data import SeriesFrame, make_windows, split_ett, synth_generate
from sparsecast.gradcheck import check_gradients
from sparsecast.losses import LossConfig, deep_supervised_loss, m_loss
from sparsecast.memory import AttentionIndexMemory
from sparsecast.models import ForwardContext, InformerLite, MLinear, ModelConfig
from sparsecast.training import TrainConfig, bench_reuse, train

SEEDS = (0, 1, 2)
TINY = dict(L=8, S=4, n_channels=2)


def test_ac01_gradient_correctness(criterion):
    with criterion("AC1 gradient correctness (ops + both models, rel err <= 1e-4, < 30 s)") as c:
        t0 = time.perf_counter()
        worst = 0.0
        for seed in SEEDS:
            for op in OPS:
                rng = np.random.default_rng(seed)
                inputs, build = _case(op, rng)
                w = rng.standard_normal(build().shape)
                worst = max(worst, *check_gradients(lambda: _weighted(build(), w), inputs))

            r = np.random.default_rng(seed)
            x, y = r.standard_normal((2, 8, 2)), r.standard_normal((2, 4, 2))
            for kind in ("sequence_mix", "feature_mix"):
                m = MLinear(ModelConfig(model="mlinear", mapping_kind=kind, P=2, seed=seed, **TINY))

                def loss():
                    total, _ = deep_supervised_loss(*m(x), y, LossConfig(kind="mse"))
                    return total

                worst = max(worst, *check_gradients(loss, m.parameters()))

            inf = InformerLite(ModelConfig(model="informer_lite", d_model=4, n_heads=2, u_factor=1.0,
                                           seed=seed, **TINY))
            mem = AttentionIndexMemory(warmup_epochs=0)
            inf(x, ForwardContext("train", memory=mem))
            mem.freeze()
            worst = max(worst, *check_gradients(
                lambda: ad.mean(ad.square(ad.sub(inf(x, ForwardContext("predict", memory=mem)), y))),
                inf.parameters(),
            ))
        elapsed = time.perf_counter() - t0
        c.detail = f"max rel err {worst:.2e}, {elapsed:.1f} s"
        assert worst <= 1e-4
        assert elapsed < 30


def test_ac02_sparse_attention_oracle(criterion):
    with criterion("AC2 prob-sparse == full attention at u = L_Q (100 shapes, <= 1e-6, < 10 s)") as c:
        t0 = time.perf_counter()
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(100):
            lq, lk, d, dv = (int(v) for v in rng.integers(1, 24, size=4))
            b = tuple(int(v) for v in rng.integers(1, 3, size=rng.integers(0, 2)))
            causal = bool(rng.integers(2)) and lq == lk
            q = rng.standard_normal(b + (lq, d))
            k = rng.standard_normal(b + (lk, d))
            v = rng.standard_normal(b + (lk, dv))
            cfg = AttentionConfig(d=d, u_factor=1e9, sample_factor=1e9, causal=causal)
            out, idx = prob_sparse_attention(q, k, v, cfg)
            assert idx == list(range(lq))
            worst = max(worst, float(np.max(np.abs(out.data - full_attention(q, k, v, causal).data))))
        elapsed = time.perf_counter() - t0
        c.detail = f"max abs diff {worst:.1e}, {elapsed:.2f} s"
        assert worst <= 1e-6 and elapsed < 10


def test_ac03_reuse_contract(criterion):
    with criterion("AC3 reuse: measurement 0, fewer multiplies, closed-form counters exact") as c:
        frame = synth_generate("sine_mix", 600, 2, seed=0)
        cfg = ModelConfig(model="informer_lite", L=48, S=24, n_channels=2, d_model=8)
        ckpt, _ = train(cfg, TrainConfig(max_epochs=2, lr0=1e-3, seed=1), split_ett(frame))
        res = bench_reuse(ckpt, split_ett(frame).test, max_windows=32)
        some_sparse = any(s["u_reuse"] < s["L_Q"] for s in res["sites"].values())
        c.detail = (f"recompute={res['recompute']['multiplies_total']} reuse={res['reuse']['multiplies_total']} "
                    f"reduction={res['multiply_reduction']:.3f}")
        assert res["reuse"]["measurement_dot_products"] == 0
        assert some_sparse and res["reuse"]["multiplies_total"] < res["recompute"]["multiplies_total"]
        assert res["recompute"] == res["expected"]["recompute"]
        assert res["reuse"] == res["expected"]["reuse"]


def test_ac04_index_round_trip(criterion):
    with criterion("AC4 single-iteration memory makes predict output bit-identical to train output") as c:
        cfg = ModelConfig(model="informer_lite", L=48, S=24, n_channels=2, d_model=8, seed=3)
        model = InformerLite(cfg)
        x = np.random.default_rng(3).standard_normal((4, 48, 2))
        mem = AttentionIndexMemory(warmup_epochs=0)
        with ad.tape():
            train_out = model(x, ForwardContext("train", memory=mem, rng=np.random.default_rng(5))).data
        mem.freeze()
        ctx = ForwardContext("predict", memory=mem)
        pred_out = model(x, ctx).data
        c.detail = f"max abs diff {np.max(np.abs(train_out - pred_out)):.1e}"
        assert np.array_equal(train_out, pred_out)
        assert ctx.counters.measurement_dot_products == 0


def test_ac05_m_loss_properties(criterion):
    with criterion("AC5 M-Loss continuity, e=3 value, evenness, zero at equality") as c:
        gaps = []
        for sigma in (0.5, 1.0, 2.0):
            inner = m_loss([sigma], [0.0], sigma).item()
            outer = (sigma + 1) * sigma - 0.5 * sigma**2
            gaps.append(abs(inner - outer))
            gaps.append(abs(m_loss([sigma + 1e-12], [0.0], sigma).item() - inner))
        assert max(gaps) <= 1e-9
        assert m_loss([3.0], [0.0], 1.0).item() == 5.5
        rng = np.random.default_rng(0)
        for _ in range(200):
            sigma = float(rng.uniform(0.1, 3))
            t = rng.standard_normal(6)
            e = rng.standard_normal(6) * rng.uniform(0.1, 10)
            zero = np.zeros_like(e)
            assert m_loss(e, zero, sigma).item() == m_loss(-e, zero, sigma).item()
            assert m_loss(t, t, sigma).item() == 0.0
            assert m_loss(t + e, t, sigma).item() > 0.0
        c.detail = f"max knee gap {max(gaps):.1e}"


def test_ac06_deep_supervision(criterion):
    with criterion("AC6 deep-supervision total == sum of parts (1e-15); single mode == mix term") as c:
        rng = np.random.default_rng(1)
        worst = 0.0
        for _ in range(50):
            y = rng.standard_normal((4, 6, 3))
            heads = [y + rng.standard_normal(y.shape) * rng.uniform(0.1, 4) for _ in range(3)]
            total, parts = deep_supervised_loss(*heads, y, LossConfig())
            worst = max(worst, abs(total.item() - (parts["ci"].item() + parts["cd"].item() + parts["mix"].item())))
            single, only = deep_supervised_loss(*heads, y, LossConfig(deep_supervision=False))
            assert list(only) == ["mix"] and single.item() == m_loss(heads[2], y).item()
        c.detail = f"max gap {worst:.1e}"
        assert worst <= 1e-15


def test_ac07_mlinear_degeneracies(criterion):
    with criterion("AC7 MLinear n=1 CI==CD when tied; CI channel independence (exact)") as c:
        rng = np.random.default_rng(2)
        single = MLinear(ModelConfig(model="mlinear", L=24, S=8, n_channels=1))
        single.cd_weight.data[...] = single.ci_weights.data[0]
        x1 = rng.standard_normal((5, 24, 1))
        assert np.array_equal(single.ci_forward(x1).data, single.cd_forward(x1).data)

        m = MLinear(ModelConfig(model="mlinear", L=24, S=8, n_channels=4))
        x = rng.standard_normal((5, 24, 4))
        base = m.ci_forward(x).data
        for j in range(4):
            y = x.copy()
            y[..., j] += rng.standard_normal((5, 24))
            diff = m.ci_forward(y).data - base
            others = np.delete(diff, j, axis=-1)
            assert not np.any(others) and np.any(diff[..., j])
        c.detail = "exact"


def test_ac08_learning_sanity(criterion):
    splits = split_ett(synth_generate("sine_mix", 2000, 3, seed=0))
    for model in ("mlinear", "informer_lite"):
        with criterion(f"AC8 {model} beats repeat-last on sine_mix (< 60 s)") as c:
            t0 = time.perf_counter()
            _, rep = train(ModelConfig(model=model, L=48, S=24, n_channels=3), TrainConfig(seed=0), splits)
            elapsed = time.perf_counter() - t0
            c.detail = f"test mse {rep.test['mse']:.4f} vs baseline {rep.baseline['mse']:.4f}, {elapsed:.1f} s"
            assert rep.test["mse"] < rep.baseline["mse"]
            assert elapsed < 60


def test_ac09_efficient_attention_linear(criterion):
    with criterion("AC9 efficient attention multiplies double with sequence length") as c:
        rng = np.random.default_rng(4)
        d_k, d_v = 3, 2
        counts = []
        for d in (16, 32, 64, 128):
            cnt = OpCounters()
            efficient_attention(rng.standard_normal((d_k, d)), rng.standard_normal((d_k, d)),
                                rng.standard_normal((d_v, d)), cnt)
            counts.append(cnt.multiplies_total)
        c.detail = f"counts {counts}"
        assert all(b == 2 * a for a, b in zip(counts, counts[1:]))


def test_ac10_split_arithmetic(criterion):
    with criterion("AC10 hourly split 8640/2880/2880; window count formula on random cases") as c:
        frame = SeriesFrame(np.zeros((14400, 1)), ["x"])
        assert split_ett(frame).sizes == (8640, 2880, 2880)
        rng = np.random.default_rng(5)
        for _ in range(300):
            T, L, S, stride = (int(v) for v in (rng.integers(1, 200), rng.integers(1, 40),
                                                 rng.integers(1, 40), rng.integers(1, 9)))
            f = SeriesFrame(np.arange(T, dtype=np.float64)[:, None], ["x"])
            expect = (T - L - S) // stride + 1 if T >= L + S else 0
            assert len(make_windows(f, L, S, stride)) == expect
        c.detail = "300 random cases"


def test_ac11_stability_diagnostic(criterion):
    with criterion("AC11 stability report on 3-epoch toy InformerLite: Jaccard in [0,1], deterministic") as c:
        splits = split_ett(synth_generate("sine_mix", 400, 2, seed=1))
        cfg = ModelConfig(model="informer_lite", L=24, S=8, n_channels=2, d_model=8)
        tcfg = TrainConfig(max_epochs=3, patience=5, lr0=1e-3, seed=6)
        reports = [train(cfg, tcfg, splits)[1] for _ in range(2)]
        rows = reports[0].stability
        assert rows and rows == reports[1].stability
        assert all(0.0 <= r["jaccard"] <= 1.0 for r in rows)
        assert {(r["epoch_a"], r["epoch_b"]) for r in rows} == {(0, 1), (1, 2)}
        mean_j = float(np.mean([r["jaccard"] for r in rows]))
        c.detail = f"{len(rows)} rows, mean Jaccard {mean_j:.3f}"


def test_top_u_budget_sanity():
    # guards the AC3 premise that default budgets are sparse at L = 48
    assert n_top(48, 5) < 48
