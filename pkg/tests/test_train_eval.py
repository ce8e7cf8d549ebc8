import math

import numpy as np
import pytest

from heartcodec.autograd import AdamState, adam_step, backward, precision, softmax_cross_entropy
from heartcodec.codec_sim import augment_manifest
from heartcodec.dataset import ClipLoader, FoldPlan, make_folds, write_synthetic_corpus
from heartcodec.m5 import build_m5, forward, predict
from heartcodec.train_eval import (
    CVReport,
    TrainConfig,
    confusion_matrix,
    cer,
    cross_validate,
    evaluate_checkpoint,
    mean_std,
    train_fold,
)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return write_synthetic_corpus(root / "orig", per_class=4, seed=0)


@pytest.fixture(scope="module")
def augmented(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("aug")
    return augment_manifest(corpus, bitrates=(4500, 7700), engine="builtin", work_dir=out, seed=0)


# --- metrics ------------------------------------------------------------------------


def test_cer_examples():
    labels = np.zeros(1000, dtype=int)
    pred = labels.copy()
    pred[:10] = 1
    assert cer(pred, labels) == 1.0
    assert cer(labels, labels) == 0.0
    assert cer(labels + 1, labels) == 100.0


def test_cer_errors():
    with pytest.raises(ValueError, match="length mismatch"):
        cer([0, 1], [0])
    with pytest.raises(ValueError, match="empty"):
        cer([], [])


def test_confusion_matrix_consistent_with_cer():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 5, 200)
    p = np.where(rng.random(200) < 0.7, y, rng.integers(0, 5, 200))
    m = confusion_matrix(p, y)
    assert m.sum() == 200
    assert m.sum(axis=1).tolist() == np.bincount(y, minlength=5).tolist()
    assert 100 * (1 - np.trace(m) / m.sum()) == pytest.approx(cer(p, y))


def test_mean_std_population():
    assert mean_std([1.0, 3.0]) == (2.0, 1.0)
    assert mean_std([4.0]) == (4.0, 0.0)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(precision=16)


# --- training -----------------------------------------------------------------------


def _fixed_batches(manifest, ids):
    loader = ClipLoader(manifest)
    return loader.stack(ids), loader.labels(ids)


def test_initial_loss_is_ln5(corpus):
    ids = [e.id for e in corpus][:10]
    x, y = _fixed_batches(corpus, ids)
    loss = softmax_cross_entropy(forward(build_m5(seed=0), x[:5], "train"), y[:5]).item()
    assert abs(loss - math.log(5)) <= 0.1


def test_loss_below_ln5_after_one_epoch(tmp_path):
    m = write_synthetic_corpus(tmp_path / "c", per_class=50, seed=2)
    plan = make_folds(m, 10, 0)
    result = train_fold(m, plan, 0, TrainConfig(epochs=1, seed=0))
    assert result.initial_loss == pytest.approx(math.log(5), abs=0.1)
    assert result.train_loss_curve[0] < math.log(5)
    assert result.n_train == 225 and result.n_test_original == 25


def test_overfits_ten_clips(corpus):
    ids = [e.id for e in corpus if e.label in range(5)][:10]
    x, y = _fixed_batches(corpus, ids)
    rng = np.random.default_rng(0)
    with precision(32):
        model = build_m5(seed=0)
        state = AdamState(lr=0.0005, weight_decay=0.0001)
        for _ in range(200):
            order = rng.permutation(10)
            for start in (0, 5):
                idx = order[start : start + 5]
                model.zero_grad()
                backward(softmax_cross_entropy(forward(model, x[idx], "train"), y[idx]))
                adam_step(model.parameters(), state)
    assert cer(predict(model, x), y) == 0.0


def test_unaugmented_training_never_reads_codec(augmented):
    loader = ClipLoader(augmented)
    plan = make_folds(augmented, 2, 0)
    train_fold(augmented, plan, 0, TrainConfig(epochs=1, k=2, use_augmented_train=False), loader)
    train_reads = [i for phase, i in loader.log if phase == "train"]
    assert train_reads and all(augmented.get(i).is_original for i in train_reads)
    eval_reads = [i for phase, i in loader.log if phase == "eval"]
    assert any(not augmented.get(i).is_original for i in eval_reads)


def test_augmented_training_reads_codec(augmented):
    loader = ClipLoader(augmented)
    plan = make_folds(augmented, 2, 0)
    r = train_fold(augmented, plan, 1, TrainConfig(epochs=1, k=2), loader)
    train_reads = [i for phase, i in loader.log if phase == "train"]
    assert sum(not augmented.get(i).is_original for i in train_reads) == 20
    assert r.n_train == 30 and r.n_test_codec == 20
    assert set(r.cer_codec_by_bitrate) == {"4500", "7700"}


def test_cross_validate_partition_and_mean(augmented, tmp_path):
    config = TrainConfig(epochs=1, k=2, seed=1)
    report = cross_validate(augmented, config, out_dir=tmp_path)
    assert [r.fold for r in report.folds] == [0, 1]
    assert sum(r.n_test_original for r in report.folds) == 20
    assert sum(r.n_test_codec for r in report.folds) == 40
    assert report.mean_cer_original == pytest.approx(np.mean([r.cer_original for r in report.folds]))
    assert report.mean_cer_codec == pytest.approx(np.mean([r.cer_codec for r in report.folds]))
    back = CVReport.read(tmp_path / "report.json")
    assert back.to_json() == report.to_json()
    assert len(list((tmp_path / "checkpoints" / report.run_id).glob("fold*.json"))) == 2


def test_cross_validate_reproducible(corpus, tmp_path):
    config = TrainConfig(epochs=1, k=2, seed=4)
    a = cross_validate(corpus, config, out_dir=tmp_path / "a")
    b = cross_validate(corpus, config, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
    assert a.mean_cer_codec is None


def test_evaluate_checkpoint(augmented, corpus, tmp_path):
    report = cross_validate(augmented, TrainConfig(epochs=1, k=2), out_dir=tmp_path)
    ckpt = tmp_path / "checkpoints" / report.run_id / "fold00.json"
    first = evaluate_checkpoint(ckpt, augmented)
    second = evaluate_checkpoint(ckpt, augmented)
    assert first == second
    assert first["original"].n == 20 and first["codec"].n == 40
    for sub in first.values():
        m = np.array(sub.confusion)
        assert np.trace(m) / m.sum() == pytest.approx(1 - sub.cer / 100)
    only = evaluate_checkpoint(ckpt, corpus, subset="codec")
    assert only["codec"].cer is None and "no codec entries" in only["codec"].note
    with pytest.raises(ValueError):
        evaluate_checkpoint(ckpt, corpus, subset="all")


def test_fold_restricted_evaluation_matches_training_report(augmented, tmp_path):
    report = cross_validate(augmented, TrainConfig(epochs=1, k=2), out_dir=tmp_path)
    plan = FoldPlan.from_dict(report.extra["fold_plan"])
    test_ids = [e.id for e in augmented if plan.fold_of(augmented, e.id) == 1]
    ckpt = tmp_path / "checkpoints" / report.run_id / "fold01.json"
    res = evaluate_checkpoint(ckpt, augmented, ids=test_ids)
    assert res["original"].cer == report.folds[1].cer_original
    assert res["codec"].cer == report.folds[1].cer_codec


def test_nan_loss_raises(corpus, monkeypatch):
    # relu maps NaN inputs to 0, so force the loss itself to be non-finite
    import heartcodec.train_eval as te

    real = te.softmax_cross_entropy

    def poisoned(logits, labels):
        out = real(logits, labels)
        out.data[...] = np.nan
        return out

    monkeypatch.setattr(te, "softmax_cross_entropy", poisoned)
    plan = make_folds(corpus, 2, 0)
    with pytest.raises(FloatingPointError, match="diverged"):
        train_fold(corpus, plan, 0, TrainConfig(epochs=1, k=2))
