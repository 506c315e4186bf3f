"""Acceptance gate: one test per shipped guarantee.

Each test prints exactly one [acceptance] PASS/FAIL line (visible even
under captured output) and then asserts. Tolerances appear literally in
the assertions; nothing here is tunable from outside.

The slow entries are the scaling benchmark and the functional training
runs; together they stay within their stated budgets on one core.
"""

import itertools
import json
import math
import time
import warnings

import numpy as np
import pytest

import casq.tensor as T
from casq.convlayers import dconv, dconv_f, lconv, lconv_f
from casq.ctc import CtcPrefixScorer, beam_search_joint, ctc_loss
from casq.harness.bench import bench_scaling
from casq.harness.cli import DESK_DIMS, PRESETS, _gradcheck_suite, main
from casq.harness.data import SyntheticTaskSpec, generate_dataset
from casq.harness.metrics import edit_distance
from casq.harness.training import TrainConfig, evaluate, train
from casq.gradcheck import finite_difference_check
from casq.model import ModelConfig, build_model, kernel_audit

from test_convlayers import naive_dconv, naive_dconv_f, naive_lconv, naive_lconv_f
from test_ctc import brute_seq_logprob


def report(capsys, label, ok, detail=""):
    with capsys.disabled():
        suffix = f" ({detail})" if detail else ""
        print(f"\n[acceptance] {label}: {'PASS' if ok else 'FAIL'}{suffix}")


# ---------------------------------------------------------------------------
# 1. convolution oracle equivalence
# ---------------------------------------------------------------------------


def test_criterion_1_conv_oracle_equivalence(capsys):
    rng = np.random.default_rng(1001)
    worst = 0.0
    counts = dict.fromkeys(("lconv", "dconv", "lconv_f", "dconv_f"), 0)
    while min(counts.values()) < 100:
        t_len = int(rng.integers(1, 9))
        d_v = int(rng.integers(1, 7))
        kk = int(rng.choice([1, 3, 5]))
        n_h = int(rng.choice(sorted({1, 2, d_v})))
        causal = bool(rng.integers(2))
        v = rng.standard_normal((t_len, d_v))
        w = rng.standard_normal((n_h, kk))
        got = lconv(T.Tensor(v), T.Tensor(w), causal=causal).data
        worst = max(worst, np.abs(got - naive_lconv(v, w, causal)).max())
        counts["lconv"] += 1

        wp = rng.standard_normal((n_h * kk, d_v))
        got = dconv(T.Tensor(v), T.Tensor(wp), n_h, kk, causal=causal).data
        worst = max(worst, np.abs(got - naive_dconv(v, wp, n_h, kk, causal)).max())
        counts["dconv"] += 1

        wf = rng.standard_normal(kk)
        got = lconv_f(T.Tensor(v), T.Tensor(wf)).data
        worst = max(worst, np.abs(got - naive_lconv_f(v, wf)).max())
        counts["lconv_f"] += 1

        wfp = rng.standard_normal((kk, d_v))
        got = dconv_f(T.Tensor(v), T.Tensor(wfp)).data
        worst = max(worst, np.abs(got - naive_dconv_f(v, wfp)).max())
        counts["dconv_f"] += 1
    ok = worst < 1e-12
    report(capsys, "criterion 1 conv oracle equivalence", ok,
           f"{min(counts.values())} instances per op, max abs err {worst:.2e}")
    assert ok


# ---------------------------------------------------------------------------
# 2. CTC against exhaustive path enumeration
# ---------------------------------------------------------------------------


def test_criterion_2_ctc_exhaustive(capsys):
    rng = np.random.default_rng(1002)
    worst = 0.0
    n_checked = n_infeasible = 0
    for t_len, vocab in itertools.product(range(1, 6), range(1, 4)):
        x = rng.standard_normal((t_len, vocab + 1))
        lp = x - np.log(np.exp(x).sum(axis=1, keepdims=True))
        for n in range(0, 4):
            for target in itertools.product(range(vocab), repeat=n):
                want = -brute_seq_logprob(lp, target)
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    got = ctc_loss(T.Tensor(lp), list(target)).item()
                if math.isinf(want):
                    assert math.isinf(got)
                    n_infeasible += 1
                else:
                    worst = max(worst, abs(got - want))
                    n_checked += 1
    ok = worst < 1e-10
    report(capsys, "criterion 2 ctc exhaustive enumeration", ok,
           f"{n_checked} feasible + {n_infeasible} infeasible cases, "
           f"max abs err {worst:.2e}")
    assert ok


# ---------------------------------------------------------------------------
# 3. finite-difference gradient suite
# ---------------------------------------------------------------------------


def test_criterion_3_gradient_suite(capsys):
    rows = []
    ok = True
    for name, build_loss, params, threshold in _gradcheck_suite(seed=0):
        err = finite_difference_check(build_loss, params)
        rows.append(f"{name} {err:.1e}")
        ok = ok and err < threshold
    report(capsys, "criterion 3 gradient suite", ok, ", ".join(rows))
    assert ok


# ---------------------------------------------------------------------------
# 4. parameter-count identity of shared kernels
# ---------------------------------------------------------------------------


def test_criterion_4_parameter_count_identity(capsys):
    checked = 0
    ok = True
    for name, overrides in PRESETS.items():
        cfg_kw = dict(DESK_DIMS)
        cfg_kw.update(overrides)
        cfg = ModelConfig(vocab_size=5, feat_dim=4, **cfg_kw)
        model = build_model(cfg, seed=0)
        for row in kernel_audit(model):
            expect_kernel = cfg.kernel_enc if row["name"].startswith("enc") else cfg.kernel_dec
            ok = ok and row["time_kernel_entries"] == cfg.n_shared * expect_kernel
            ok = ok and row["time_kernel_entries"] == row["shared_expected"]
            ok = ok and row["depthwise_entries"] == cfg.d_att * expect_kernel
            checked += 1
        if overrides.get("decoder_type", "sa") == "sa":
            ok = ok and kernel_audit(model) == []
    report(capsys, "criterion 4 parameter count identity", ok,
           f"{checked} conv blocks across {len(PRESETS)} presets, exact equality")
    assert ok


# ---------------------------------------------------------------------------
# 5. complexity scaling windows
# ---------------------------------------------------------------------------


def test_criterion_5_complexity_scaling(capsys):
    t0 = time.perf_counter()
    rep = bench_scaling(kinds=("sa", "lconv", "dconv"),
                        lengths=(128, 256, 512, 1024, 2048, 4096),
                        d_att=64, kernel=31, n_shared=4, n_samples=10)
    elapsed = time.perf_counter() - t0
    sa = rep.results["sa"].slope
    lc = rep.results["lconv"].slope
    dc = rep.results["dconv"].slope
    ok = 1.7 <= sa <= 2.3 and 0.8 <= lc <= 1.3 and 0.8 <= dc <= 1.3
    report(capsys, "criterion 5 complexity scaling", ok,
           f"slopes sa {sa:.2f} lconv {lc:.2f} dconv {dc:.2f}, {elapsed:.0f}s")
    assert ok
    assert elapsed < 600


# ---------------------------------------------------------------------------
# 6. functional training on the copy task
# ---------------------------------------------------------------------------


def test_criterion_6_functional_training(capsys):
    spec = SyntheticTaskSpec(task="copy", vocab_size=20, feat_dim=8, t_min=10,
                             t_max=30, noise_std=0.0, n_train=2000, n_dev=200,
                             n_test=200, seed=0)
    ds = generate_dataset(spec)
    t_all = time.perf_counter()
    results = []
    ok = True
    for preset in ("sa", "lc", "sa-lc"):
        cfg_kw = dict(DESK_DIMS)
        cfg_kw.update(PRESETS[preset])
        model = build_model(ModelConfig(vocab_size=20, feat_dim=8, **cfg_kw), seed=0)
        tcfg = TrainConfig(epochs=30, batch_size=20, lr_schedule="noam",
                           lr_factor=1.0, warmup_steps=400, seed=0,
                           target_dev_ter=0.04)
        hist = train(model, {"train": ds.splits["train"], "dev": ds.splits["dev"]},
                     tcfg)
        rep, _ = evaluate(model, ds.splits["test"], beam_size=4, gamma=0.3)
        ter = rep["error_rate"]
        results.append(f"{preset} ter {ter:.3f} @{len(hist)}ep")
        ok = ok and ter <= 0.05 and len(hist) <= 30
    elapsed = time.perf_counter() - t_all
    report(capsys, "criterion 6 functional training", ok,
           ", ".join(results) + f", {elapsed:.0f}s total")
    assert ok
    assert elapsed < 1800


# ---------------------------------------------------------------------------
# 7. decoding invariants
# ---------------------------------------------------------------------------


def _greedy_decode(model, enc, max_len):
    """Independent argmax loop over the attention decoder."""
    tokens = []
    with T.no_grad():
        for _ in range(max_len):
            logits = model.att_logits(enc, [model.sos_id, *tokens])
            c = int(np.argmax(logits.data[-1]))
            if c == model.eos_id:
                break
            tokens.append(c)
    return tuple(tokens)


def _exhaustive_best(model, enc, gamma, max_len):
    """Score every token sequence up to max_len; ties break to the
    lexicographically smaller sequence."""
    with T.no_grad():
        scorer = CtcPrefixScorer(T.log_softmax_rows(model.ctc_logits(enc)).data)
        vocab = model.config.vocab_size
        best = None
        for n in range(0, max_len + 1):
            for seq in itertools.product(range(vocab), repeat=n):
                att = 0.0
                for i in range(n + 1):
                    logits = model.att_logits(enc, [model.sos_id, *seq[:i]])
                    lp = T.log_softmax_rows(T.slice_rc(logits, rows=slice(-1, None))).data[0]
                    att += lp[seq[i]] if i < n else lp[model.eos_id]
                if gamma == 0.0:
                    comb = att  # never mix in CTC: 0 * (-inf) would poison it
                else:
                    state = scorer.initial_state()
                    for tok in seq:
                        state = scorer.extend(state, tok)
                    comb = (1 - gamma) * att + gamma * scorer.eos_score(state)
                rank = comb / (n + 1)
                key = (-rank, seq)
                if best is None or key < best[0]:
                    best = (key, seq, rank)
    return best[1], best[2]


def test_criterion_7_decoding_invariants(capsys):
    rng = np.random.default_rng(1007)
    kinds = ("sa", "lconv", "dconv", "lconv2d", "dconv2d")
    n_greedy = 0
    greedy_ok = True
    for i in range(10):
        kind = kinds[i % len(kinds)]
        enc_kind = "sa" if kind == "sa" else kind
        cfg = ModelConfig(vocab_size=int(rng.integers(3, 7)), feat_dim=3,
                          encoder_type=enc_kind, decoder_type=kind, n_enc=1,
                          n_dec=1, d_att=8, d_ff=16, n_heads=2, n_shared=2,
                          kernel_enc=3, kernel_dec=3, dropconnect=0.0)
        model = build_model(cfg, seed=int(rng.integers(10000)))
        for _ in range(5):
            feats = rng.standard_normal((int(rng.integers(3, 9)), 3))
            with T.no_grad():
                enc = model.encode(feats)
            hyp = beam_search_joint(model, enc, beam_size=1, ctc_gamma=0.0)[0]
            greedy = _greedy_decode(model, enc, max_len=2 * enc.shape[0])
            greedy_ok = greedy_ok and hyp.tokens == greedy
            n_greedy += 1

    n_exh = 0
    exh_ok = True
    for seed in range(6):
        vocab = 2 + seed % 2
        cfg = ModelConfig(vocab_size=vocab, feat_dim=2, n_enc=1, n_dec=1,
                          d_att=8, d_ff=16, n_heads=2, dropconnect=0.0)
        model = build_model(cfg, seed=200 + seed)
        feats = np.random.default_rng(300 + seed).standard_normal((4, 2))
        with T.no_grad():
            enc = model.encode(feats)
        for gamma in (0.0, 0.3):
            want_toks, want_rank = _exhaustive_best(model, enc, gamma, max_len=3)
            got = beam_search_joint(model, enc, beam_size=64, ctc_gamma=gamma,
                                    max_len=3)[0]
            exh_ok = exh_ok and got.tokens == want_toks
            exh_ok = exh_ok and abs(got.ranking - want_rank) < 1e-10
            n_exh += 1
    ok = greedy_ok and exh_ok
    report(capsys, "criterion 7 decoding invariants", ok,
           f"greedy match {n_greedy}/50, exhaustive match {n_exh}/12")
    assert ok


# ---------------------------------------------------------------------------
# 8. determinism of eval and bench streams
# ---------------------------------------------------------------------------


def _stripped_lines(raw: str):
    out = []
    for line in raw.splitlines():
        rec = json.loads(line)
        rec.pop("timing", None)
        out.append(rec)
    return out


def test_criterion_8_determinism(capsys, tmp_path):
    from casq.harness.data import save_split

    spec = SyntheticTaskSpec(task="copy", vocab_size=5, feat_dim=4, t_min=4,
                             t_max=8, n_train=4, n_dev=6, n_test=6, seed=21)
    ds = generate_dataset(spec)
    for split, utts in ds.splits.items():
        save_split(str(tmp_path / f"{split}.data"), utts, spec)
    conf = tmp_path / "m.conf"
    conf.write_text("n_enc = 1\nn_dec = 1\nd_att = 8\nd_ff = 16\nn_heads = 2\n"
                    "dropconnect = 0.0\n")

    evals = []
    for _ in range(2):
        rc = main(["eval", "--data", str(tmp_path), "--split", "dev",
                   "--config", str(conf), "--beam", "2", "--gamma", "0.3",
                   "--seed", "5"])
        assert rc == 0
        evals.append(_stripped_lines(capsys.readouterr().out))
    eval_ok = evals[0] == evals[1] and len(evals[0]) == 7

    benches = []
    for _ in range(2):
        rc = main(["bench", "--kinds", "sa,lconv", "--lengths", "8,16,32,64,128",
                   "--d-att", "8", "--kernel", "3", "--n-shared", "2",
                   "--samples", "10", "--seed", "2"])
        assert rc == 0
        benches.append(_stripped_lines(capsys.readouterr().out))
    bench_ok = benches[0] == benches[1] and len(benches[0]) == 12
    ok = eval_ok and bench_ok
    report(capsys, "criterion 8 determinism", ok,
           f"eval lines {len(evals[0])}, bench lines {len(benches[0])}, "
           "timing subtree excluded")
    assert ok
