"""Cross-validated training and evaluation of M5 on a manifest.

Test CER is computed separately on the original recordings and on their
codec copies.  Codec copies always share their parent's fold.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autograd import AdamState, adam_step, backward, precision, softmax_cross_entropy
from .dataset import CLASSES, INPUT_LEN, INPUT_RATE, ClipLoader, FoldPlan, Manifest, fold_split, make_folds
from .m5 import M5Arch, build_m5, forward, load_checkpoint, predict, save_checkpoint

log = logging.getLogger(__name__)

REPORT_FORMAT = "heartcodec-cv-report"
N_CLASSES = len(CLASSES)

# purpose codes mixed into derived seeds
_SEED_FOLDS, _SEED_INIT, _SEED_SHUFFLE = 1, 2, 3


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 5
    lr: float = 0.0005
    weight_decay: float = 0.0001
    input_rate: int = INPUT_RATE
    input_len: int = INPUT_LEN
    k: int = 10
    seed: int = 0
    use_augmented_train: bool = True
    engine: str | None = None
    bitrates: tuple[int, ...] = ()
    precision: int = 32

    def __post_init__(self):
        for name in ("epochs", "batch_size", "input_rate", "input_len", "k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError(f"invalid optimizer settings lr={self.lr} weight_decay={self.weight_decay}")
        if self.precision not in (32, 64):
            raise ValueError(f"precision must be 32 or 64, got {self.precision}")
        self.bitrates = tuple(int(b) for b in self.bitrates)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bitrates"] = list(self.bitrates)
        return d


def derived_seed(seed: int, *parts: int) -> int:
    return int(np.random.SeedSequence([seed, *parts]).generate_state(1)[0])


def cer(predictions, labels) -> float:
    """Classification error rate in percent."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"length mismatch: {predictions.shape} predictions vs {labels.shape} labels")
    if labels.size == 0:
        raise ValueError("cer of an empty set is undefined")
    return 100.0 * int(np.count_nonzero(predictions != labels)) / labels.size


def confusion_matrix(predictions, labels, n_classes: int = N_CLASSES) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (np.asarray(labels), np.asarray(predictions)), 1)
    return m


@dataclass
class FoldResult:
    fold: int
    cer_original: float
    cer_codec: float | None
    cer_codec_by_bitrate: dict[str, float]
    confusion_original: list[list[int]]
    confusion_codec: list[list[int]] | None
    train_loss_curve: list[float]
    initial_loss: float
    n_train: int
    n_test_original: int
    n_test_codec: int


@dataclass
class CVReport:
    config: dict
    folds: list[FoldResult]
    mean_cer_original: float
    std_cer_original: float
    mean_cer_codec: float | None
    std_cer_codec: float | None
    manifest_sha256: str = ""
    run_id: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {"format": REPORT_FORMAT, **asdict(self)}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def write(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "CVReport":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        doc.pop("format", None)
        doc["folds"] = [FoldResult(**f) for f in doc["folds"]]
        return cls(**doc)


def mean_std(values) -> tuple[float, float]:
    """Arithmetic mean (``fsum / n``) and population standard deviation."""
    values = list(values)
    return math.fsum(values) / len(values), statistics.pstdev(values)


def _evaluate(model, loader: ClipLoader, ids, chunk: int = 50):
    x = loader.stack(ids)
    y = loader.labels(ids)
    pred = predict(model, x, chunk)
    return pred, y


def train_fold(
    manifest: Manifest,
    plan: FoldPlan,
    fold: int,
    config: TrainConfig,
    loader: ClipLoader | None = None,
    checkpoint_path=None,
) -> FoldResult:
    """Train a fresh M5 on every fold but ``fold`` and test on ``fold``.

    Reads during training are logged under phase ``"train"`` and during
    testing under ``"eval"`` in ``loader.log``.
    """
    with precision(config.precision):
        return _train_fold(manifest, plan, fold, config, loader, checkpoint_path)


def _train_fold(manifest, plan, fold, config, loader, checkpoint_path):
    train_ids, test_orig, test_codec = fold_split(manifest, plan, fold, config.use_augmented_train)
    if not train_ids:
        raise ValueError(f"fold {fold}: empty training split")
    loader = loader or ClipLoader(manifest, config.input_rate, config.input_len)

    loader.phase = "train"
    x_train = loader.stack(train_ids)
    y_train = loader.labels(train_ids)
    arch = M5Arch(num_classes=N_CLASSES, input_len=config.input_len)
    model = build_m5(N_CLASSES, seed=derived_seed(config.seed, _SEED_INIT, fold), arch=arch)
    state = AdamState(lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(derived_seed(config.seed, _SEED_SHUFFLE, fold))
    params = model.parameters()
    bs = config.batch_size
    n = len(train_ids)

    initial_loss = _initial_loss(model, x_train, y_train, bs)
    curve = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            model.zero_grad()
            loss = softmax_cross_entropy(forward(model, x_train[idx], "train"), y_train[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise FloatingPointError(f"fold {fold}: loss diverged ({value}) at epoch {epoch}")
            backward(loss)
            adam_step(params, state)
            total += value * len(idx)
        curve.append(total / n)
        log.debug("fold %d epoch %d loss %.5f", fold, epoch, curve[-1])

    loader.phase = "eval"
    pred, y = _evaluate(model, loader, test_orig)
    conf_o = confusion_matrix(pred, y)
    cer_codec = None
    conf_c = None
    by_bitrate = {}
    if test_codec:
        pred_c, y_c = _evaluate(model, loader, test_codec)
        cer_codec = cer(pred_c, y_c)
        conf_c = confusion_matrix(pred_c, y_c).tolist()
        bitrates = np.array([manifest.get(i).bitrate_bps for i in test_codec])
        for b in sorted(set(bitrates.tolist())):
            sel = bitrates == b
            by_bitrate[str(b)] = cer(pred_c[sel], y_c[sel])
    if checkpoint_path is not None:
        Path(checkpoint_path).parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, checkpoint_path, adam=state, extra={"fold": fold, "seed": config.seed})
    return FoldResult(
        fold=fold,
        cer_original=cer(pred, y),
        cer_codec=cer_codec,
        cer_codec_by_bitrate=by_bitrate,
        confusion_original=conf_o.tolist(),
        confusion_codec=conf_c,
        train_loss_curve=curve,
        initial_loss=initial_loss,
        n_train=n,
        n_test_original=len(test_orig),
        n_test_codec=len(test_codec),
    )


def _initial_loss(model, x, y, bs: int) -> float:
    """Mean train-mode loss of the untrained model (on a copy; state untouched)."""
    probe = model.copy()
    total = 0.0
    for start in range(0, len(y), bs):
        total += softmax_cross_entropy(forward(probe, x[start : start + bs], "train"), y[start : start + bs]).item() * len(
            y[start : start + bs]
        )
    return total / len(y)


def manifest_digest(manifest: Manifest) -> str:
    return hashlib.sha256(manifest.dumps().encode()).hexdigest()


def run_id_for(config: TrainConfig, digest: str) -> str:
    blob = json.dumps({"config": config.to_dict(), "manifest": digest}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _fold_worker(args):
    manifest, plan, fold, config, ckpt = args
    return train_fold(manifest, plan, fold, config, checkpoint_path=ckpt)


def cross_validate(
    manifest: Manifest,
    config: TrainConfig,
    out_dir=None,
    jobs: int = 1,
    plan: FoldPlan | None = None,
    loader: ClipLoader | None = None,
) -> CVReport:
    """Run every fold and aggregate.  With ``out_dir``, writes ``report.json``
    and one checkpoint per fold under ``checkpoints/<run_id>/``."""
    plan = plan or make_folds(manifest, config.k, derived_seed(config.seed, _SEED_FOLDS))
    if plan.k != config.k:
        raise ValueError(f"fold plan has k={plan.k} but config.k={config.k}")
    digest = manifest_digest(manifest)
    run_id = run_id_for(config, digest)
    ckpts = [None] * plan.k
    if out_dir is not None:
        ckpts = [Path(out_dir) / "checkpoints" / run_id / f"fold{f:02d}.json" for f in range(plan.k)]

    results: list[FoldResult] = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_fold_worker, (manifest, plan, f, config, ckpts[f])) for f in range(plan.k)]
            for f, fut in enumerate(futures):
                try:
                    results.append(fut.result())
                except Exception as exc:
                    raise RuntimeError(f"fold {f} failed: {exc}") from exc
    else:
        loader = loader or ClipLoader(manifest, config.input_rate, config.input_len)
        for f in range(plan.k):
            try:
                results.append(train_fold(manifest, plan, f, config, loader, ckpts[f]))
            except Exception as exc:
                raise RuntimeError(f"fold {f} failed: {exc}") from exc
            log.info("fold %d: original CER %.2f%%, codec CER %s", f, results[-1].cer_original, results[-1].cer_codec)

    mean_o, std_o = mean_std(r.cer_original for r in results)
    codec_vals = [r.cer_codec for r in results if r.cer_codec is not None]
    mean_c = std_c = None
    if codec_vals:
        mean_c, std_c = mean_std(codec_vals)
    report = CVReport(
        config=config.to_dict(),
        folds=results,
        mean_cer_original=mean_o,
        std_cer_original=std_o,
        mean_cer_codec=mean_c,
        std_cer_codec=std_c,
        manifest_sha256=digest,
        run_id=run_id,
        extra={"fold_plan": plan.to_dict()},
    )
    if out_dir is not None:
        report.write(Path(out_dir) / "report.json")
    return report


@dataclass
class SubsetResult:
    subset: str
    n: int
    cer: float | None
    confusion: list[list[int]] | None
    note: str = ""


def evaluate_checkpoint(
    checkpoint, manifest: Manifest, subset: str = "both", ids=None, arch: M5Arch | None = None
) -> dict[str, SubsetResult]:
    """Eval-mode CER and confusion matrix per requested subset.

    A subset with no entries is reported with ``cer=None`` and a note, never
    as 0% error.  ``ids`` optionally restricts evaluation (e.g. to one fold's
    test set).
    """
    if subset not in ("original", "codec", "both"):
        raise ValueError(f"subset must be original, codec or both; got {subset!r}")
    model = load_checkpoint(checkpoint, expected_arch=arch)
    loader = ClipLoader(manifest, INPUT_RATE, model.arch.input_len)
    keep = None if ids is None else set(ids)
    wanted = ["original", "codec"] if subset == "both" else [subset]
    out = {}
    for name in wanted:
        sel = [e.id for e in manifest if (e.is_original == (name == "original")) and (keep is None or e.id in keep)]
        if not sel:
            out[name] = SubsetResult(name, 0, None, None, f"no {name} entries")
            continue
        pred, y = _evaluate(model, loader, sel)
        out[name] = SubsetResult(name, len(sel), cer(pred, y), confusion_matrix(pred, y).tolist())
    return out
