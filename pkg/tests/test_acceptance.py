"""Acceptance suite.

Each test prints one ``ACCEPTANCE <n>: PASS|FAIL`` line (visible under
``pytest -v``) and then asserts the criterion at its stated tolerance.

Tier 1 (criteria 1-8) is hermetic.  Tier 2 (criterion 9) runs only when
``HEARTCODEC_Y18`` points at a class-per-directory copy of the Y-18 corpus
and an external Opus encoder is available.
"""

import math
import os
import time

import numpy as np
import pytest

from heartcodec.autograd import (
    AdamState,
    Tensor,
    adam_step,
    backward,
    conv1d,
    linear,
    maxpool1d,
    precision,
    softmax_cross_entropy,
)
from heartcodec.audio_io import read_wav
from heartcodec.cli import main as cli_main
from heartcodec.codec_sim import STANDARD_BITRATES, CodecSpec, augment_manifest, simulate_codec_builtin, spectral_distortion
from heartcodec.dataset import CLASSES, ClipLoader, fold_split, make_folds, scan_y18, write_synthetic_corpus
from heartcodec.gradsuite import run_suite, summarize
from heartcodec.m5 import build_m5, forward, predict, shape_trace
from heartcodec.train_eval import TrainConfig, cer, cross_validate

Y18_ENV = "HEARTCODEC_Y18"
# epoch count is not among the fixed hyperparameters; 10 keeps criterion 7 within its time budget
CV_EPOCHS = int(os.environ.get("HEARTCODEC_ACCEPT_EPOCHS", "10"))
JOBS = min(4, os.cpu_count() or 1)


@pytest.fixture
def verdict(capsys):
    def emit(criterion, passed, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {criterion}: {'PASS' if passed else 'FAIL'}  {detail}")
        return passed

    return emit


@pytest.fixture(scope="module")
def corpus100(tmp_path_factory):
    """100 synthetic originals (20 per class) plus builtin copies at 3 bitrates."""
    root = tmp_path_factory.mktemp("corpus100")
    originals = write_synthetic_corpus(root / "orig", per_class=20, seed=0)
    augmented = augment_manifest(originals, STANDARD_BITRATES, engine="builtin", work_dir=root / "aug", seed=0)
    return originals, augmented


# --- 1 -------------------------------------------------------------------------------


def test_1_gradient_suite(verdict):
    start = time.process_time()
    results = {bits: run_suite(bits, seeds=range(20)) for bits in (32, 64)}
    elapsed = time.process_time() - start
    parts, ok = [], elapsed < 120
    for bits, res in results.items():
        for kind, prefix in (("ops", ""), ("end-to-end", "m5")):
            summary = {n: v for n, v in summarize(res).items() if n.startswith("m5") == (prefix == "m5")}
            worst_name = max(summary, key=lambda n: summary[n][0])
            worst, tol, _ = summary[worst_name]
            passed = all(v[2] for v in summary.values())
            ok &= passed
            parts.append(f"{bits}-bit {kind} worst {worst:.2e} ({worst_name}) tol {tol:g} {'ok' if passed else 'FAIL'}")
    parts.append(f"cpu {elapsed:.0f}s")
    assert verdict(1, ok, "; ".join(parts)), "; ".join(parts)


# --- 2 -------------------------------------------------------------------------------


def _naive_conv1d(x, w, b, stride):
    B, cin, L = x.shape
    cout, _, K = w.shape
    out = np.zeros((B, cout, (L - K) // stride + 1))
    for n in range(B):
        for o in range(cout):
            for t in range(out.shape[2]):
                out[n, o, t] = b[o] + sum(w[o, c, k] * x[n, c, t * stride + k] for c in range(cin) for k in range(K))
    return out


def _naive_maxpool(x, window):
    B, C, L = x.shape
    out = np.zeros((B, C, L // window))
    for n in range(B):
        for c in range(C):
            for t in range(L // window):
                out[n, c, t] = max(x[n, c, t * window : (t + 1) * window])
    return out


def _naive_linear(x, w, b):
    return np.array([[b[o] + sum(x[n, f] * w[o, f] for f in range(x.shape[1])) for o in range(w.shape[0])]
                     for n in range(x.shape[0])])


def test_2_oracle_equivalence(verdict):
    worst = {}
    for bits in (32, 64):
        with precision(bits):
            for i in range(100):
                rng = np.random.default_rng([bits, i])
                B, cin, cout, K, stride = (int(v) for v in rng.integers(1, 4, 3).tolist() + [rng.integers(1, 6), rng.integers(1, 4)])
                L = int(rng.integers(K, K + 20))
                x, w, b = rng.standard_normal((B, cin, L)), rng.standard_normal((cout, cin, K)), rng.standard_normal(cout)
                got = conv1d(Tensor(x), Tensor(w), Tensor(b), stride).data
                ref = _naive_conv1d(*(a.astype(got.dtype).astype(float) for a in (x, w, b)), stride)
                worst["conv1d"] = max(worst.get("conv1d", 0), np.max(np.abs(got - ref)))

                window = int(rng.integers(1, 5))
                xp = rng.standard_normal((B, cin, int(rng.integers(window, 30))))
                got = maxpool1d(Tensor(xp), window).data
                ref = _naive_maxpool(xp.astype(got.dtype).astype(float), window)
                worst["maxpool"] = max(worst.get("maxpool", 0), np.max(np.abs(got - ref), initial=0))

                F, O = int(rng.integers(1, 10)), int(rng.integers(1, 6))
                xl, wl, bl = rng.standard_normal((B, F)), rng.standard_normal((O, F)), rng.standard_normal(O)
                got = linear(Tensor(xl), Tensor(wl), Tensor(bl)).data
                ref = _naive_linear(*(a.astype(got.dtype).astype(float) for a in (xl, wl, bl)))
                worst["linear"] = max(worst.get("linear", 0), np.max(np.abs(got - ref)))
    ok = all(v <= 1e-5 for v in worst.values())
    detail = ", ".join(f"{k} max abs diff {v:.1e}" for k, v in worst.items()) + " (tol 1e-5, 100 instances x 2 modes)"
    assert verdict(2, ok, detail), detail


# --- 3 -------------------------------------------------------------------------------


def test_3_shape_trace(verdict):
    model = build_m5(seed=0)
    logits = forward(model, np.random.default_rng(0).standard_normal((5, 1, 8000)), "eval")
    trace = shape_trace(model.arch)
    enumerated = sum(int(np.prod(p.shape)) for p in model.parameters())
    formula, cin = 0, 1
    for cout, k in zip(model.arch.channels, model.arch.kernels):
        formula += cout * cin * k + cout + 2 * cout
        cin = cout
    formula += 5 * cin + 5
    ok = logits.shape == (5, 5) and trace == [496, 124, 122, 30, 28, 7, 5, 1] and enumerated == formula
    detail = f"logits {logits.shape}, trace {trace}, params {enumerated} (formula {formula})"
    assert verdict(3, ok, detail), detail


# --- 4 -------------------------------------------------------------------------------


def test_4_loss_anchors(corpus100, verdict):
    originals, _ = corpus100
    ids = [next(e.id for e in originals if e.label == c and e.id.endswith(f"_{i:04d}")) for i in range(2) for c in range(5)]
    loader = ClipLoader(originals)
    x, y = loader.stack(ids), loader.labels(ids)
    with precision(32):
        model = build_m5(seed=0)
        initial = softmax_cross_entropy(forward(model, x[:5], "train"), y[:5]).item()
        state = AdamState(lr=0.0005, weight_decay=0.0001)
        rng = np.random.default_rng(0)
        reached = None
        for epoch in range(1, 201):
            order = rng.permutation(len(ids))
            for start in range(0, len(ids), 5):
                idx = order[start : start + 5]
                model.zero_grad()
                backward(softmax_cross_entropy(forward(model, x[idx], "train"), y[idx]))
                adam_step(model.parameters(), state)
            if cer(predict(model, x), y) == 0.0:
                reached = epoch
                break
    ok = abs(initial - math.log(5)) <= 0.1 and reached is not None
    detail = f"initial loss {initial:.4f} vs ln5 {math.log(5):.4f}; training CER 0 at epoch {reached}"
    assert verdict(4, ok, detail), detail


# --- 5 -------------------------------------------------------------------------------


def test_5_fold_invariants(corpus100, verdict):
    originals, m = corpus100
    plan = make_folds(m, 10, seed=0)
    problems = []
    if len(m) != 4 * len(originals):
        problems.append(f"count {len(m)} != 4*{len(originals)}")
    seen = []
    for f in range(10):
        train, test_o, test_c = fold_split(m, plan, f, use_augmented_train=True)
        seen += test_o
        test_all = set(test_o) | set(test_c)
        if set(train) & test_all:
            problems.append(f"fold {f}: train/test overlap")
        leaked = [i for i in train if m.get(i).parent_id in set(test_o)]
        if leaked:
            problems.append(f"fold {f}: {len(leaked)} codec descendants of test originals in train")
        if {m.get(i).parent_id for i in test_c} != set(test_o) or len(test_c) != 3 * len(test_o):
            problems.append(f"fold {f}: codec test set does not mirror originals")
    if sorted(seen) != sorted(e.id for e in originals):
        problems.append("test folds do not partition the originals")
    for label in range(5):
        sizes = [sum(1 for i, g in plan.assignment.items() if g == f and m.get(i).label == label) for f in range(10)]
        if max(sizes) - min(sizes) > 1:
            problems.append(f"class {CLASSES[label]} fold sizes {sizes}")
    detail = f"{len(originals)} originals -> {len(m)} entries, k=10; " + ("; ".join(problems) or "no violations")
    assert verdict(5, not problems, detail), detail


# --- 6 -------------------------------------------------------------------------------


def test_6_codec_monotonicity(corpus100, verdict):
    originals, _ = corpus100
    clip_ids = [e.id for e in originals][::10]  # fixed 10 clips, 2 per class
    means, violations = np.zeros(3), []
    for cid in clip_ids:
        clip = read_wav(originals.resolve(originals.get(cid)))
        d = [spectral_distortion(clip, simulate_codec_builtin(clip, CodecSpec("builtin_mdct", b), 0)) for b in STANDARD_BITRATES]
        means += np.array(d) / len(clip_ids)
        if not d[0] > d[1] > d[2]:
            violations.append(f"{cid}: {d}")
    ok = not violations and means[0] > means[1] > means[2]
    detail = f"mean distortion {means[0]:.4f} > {means[1]:.4f} > {means[2]:.4f} at {STANDARD_BITRATES}; " + (
        "; ".join(violations) or "strict on every clip"
    )
    assert verdict(6, ok, detail), detail


# --- 7 -------------------------------------------------------------------------------


def test_7_end_to_end_synthetic_cv(tmp_path, verdict):
    start = time.perf_counter()
    originals = write_synthetic_corpus(tmp_path / "orig", per_class=100, seed=0)
    m = augment_manifest(originals, STANDARD_BITRATES, engine="builtin", work_dir=tmp_path / "aug", seed=0, jobs=JOBS)
    common = dict(epochs=CV_EPOCHS, batch_size=5, lr=0.0005, weight_decay=0.0001, k=10, seed=0, engine="builtin")
    plain = cross_validate(m, TrainConfig(use_augmented_train=False, **common), jobs=JOBS)
    aug = cross_validate(m, TrainConfig(use_augmented_train=True, **common), jobs=JOBS)
    minutes = (time.perf_counter() - start) / 60
    ok = plain.mean_cer_original <= 5.0 and aug.mean_cer_codec < plain.mean_cer_codec and minutes < 15
    detail = (
        f"{CV_EPOCHS} epochs, jobs {JOBS}: unaugmented original {plain.mean_cer_original:.2f}% codec "
        f"{plain.mean_cer_codec:.2f}%; augmented original {aug.mean_cer_original:.2f}% codec {aug.mean_cer_codec:.2f}%; "
        f"wall {minutes:.1f} min"
    )
    assert verdict(7, ok, detail), detail


# --- 8 -------------------------------------------------------------------------------


def test_8_determinism(tmp_path, verdict):
    assert cli_main(["synth", "--out", str(tmp_path / "orig"), "--per-class", "4", "--seed", "3"]) == 0
    assert cli_main(["augment", "--manifest", str(tmp_path / "orig" / "manifest.jsonl"), "--out", str(tmp_path / "aug"),
                     "--engine", "builtin", "--seed", "3"]) == 0
    reports = []
    for run in ("a", "b"):
        rc = cli_main(["train", "--manifest", str(tmp_path / "aug" / "manifest.jsonl"), "--out", str(tmp_path / run),
                       "--k", "2", "--epochs", "2", "--seed", "3", "--jobs", "1", "--engine", "builtin"])
        assert rc == 0
        reports.append((tmp_path / run / "report.json").read_bytes())
    ok = reports[0] == reports[1]
    detail = f"two --jobs 1 runs: reports {'byte-identical' if ok else 'differ'} ({len(reports[0])} bytes)"
    assert verdict(8, ok, detail), detail


# --- 9 (tier 2) ----------------------------------------------------------------------


@pytest.mark.skipif(not os.environ.get(Y18_ENV), reason=f"set {Y18_ENV} to a Y-18 copy to run tier 2")
def test_9_y18_reproduction(tmp_path, verdict):
    epochs = int(os.environ.get("HEARTCODEC_Y18_EPOCHS", "100"))
    jobs = int(os.environ.get("HEARTCODEC_JOBS", str(os.cpu_count() or 1)))
    originals = scan_y18(os.environ[Y18_ENV])
    m = augment_manifest(originals, STANDARD_BITRATES, engine="external", work_dir=tmp_path / "aug", seed=0, jobs=jobs)
    common = dict(epochs=epochs, k=10, seed=0, engine="external", bitrates=STANDARD_BITRATES)
    plain = cross_validate(m, TrainConfig(use_augmented_train=False, **common), jobs=jobs)
    aug = cross_validate(m, TrainConfig(use_augmented_train=True, **common), jobs=jobs)
    ok = plain.mean_cer_original <= 2.0 and aug.mean_cer_original <= 1.0 and aug.mean_cer_codec <= 1.5
    detail = (
        f"unaugmented original {plain.mean_cer_original:.2f}% (<=2.0); augmented original "
        f"{aug.mean_cer_original:.2f}% (<=1.0), codec {aug.mean_cer_codec:.2f}% (<=1.5)"
    )
    assert verdict(9, ok, detail), detail

