"""Losses, learning-rate scheduling and the staged training driver.

Training runs in four steps that each consume the frozen output of the one
before: ``1`` (pose classifier), ``2`` (crowd map), ``3-pre`` (each category
branch on its own) and ``3-joint`` (both branches with the cross connection).
Every step writes its best-on-validation checkpoint, a CSV log and a resumable
state into one work directory, next to the shared ``split.json``.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import Config, LossConfig, SaddleConfig
from .density import Category, render_categories
from .phase1 import ClassifierModel, KeypointRecord, bce_loss, feature_matrix
from .phase2 import DOWNSAMPLE, Phase2Model
from .phase3 import Phase3Model
from .pipeline import (
    PHASE1_FILE,
    PHASE2_FILE,
    PHASE3_FILE,
    PHASE3_SIT_PRE_FILE,
    PHASE3_STAND_PRE_FILE,
    SPLIT_FILE,
    MissingArtifactError,
    crowd_maps,
    detection_maps,
    load_classifier,
    load_phase2,
    new_classifier,
    new_phase2,
    new_phase3,
    require,
)
from .synth import Corpus
from .tensor import (
    AdamState,
    ModelParams,
    Tensor,
    adam_step,
    add,
    avgpool_down,
    backward,
    no_grad,
    precision,
    read_checkpoint,
    save_params,
    scale,
    square_sum,
    sub,
    write_checkpoint,
)

PHASES = ("1", "2", "3-pre", "3-joint")
LOG_COLUMNS = ("epoch", "split", "loss", "lr", "escape", "metric")

# -- losses ------------------------------------------------------------------------


def weighted_mse(pred: Tensor, gt, sigma: float, n_images: int | None = None) -> Tensor:
    """``sigma / n_images * sum((pred - gt)^2)`` over every image and pixel.

    ``n_images`` defaults to the leading (batch) axis of a 4-d stack, else 1.
    """
    target = gt if isinstance(gt, Tensor) else Tensor(gt)
    if pred.shape != target.shape:
        raise ValueError(f"weighted_mse: prediction shape {pred.shape} != ground truth shape {target.shape}")
    if n_images is None:
        n_images = pred.shape[0] if pred.ndim == 4 else 1
    return scale(square_sum(sub(pred, target)), sigma / n_images)


def phase2_loss(final_map: Tensor, regression_map: Tensor, gt_map, cfg: LossConfig, n_images: int | None = None) -> Tensor:
    loss = weighted_mse(final_map, gt_map, cfg.sigma_crowd, n_images)
    if cfg.sigma_regression_aux > 0:
        loss = add(loss, weighted_mse(regression_map, gt_map, cfg.sigma_regression_aux, n_images))
    return loss


def phase3_joint_loss(final_sit: Tensor, final_stand: Tensor, gt_sit, gt_stand, cfg: LossConfig, n_images: int | None = None) -> Tensor:
    return add(
        weighted_mse(final_sit, gt_sit, cfg.sigma_sit, n_images),
        weighted_mse(final_stand, gt_stand, cfg.sigma_stand, n_images),
    )


# -- saddle escape -----------------------------------------------------------------


class SaddleStatus(str, enum.Enum):
    NORMAL = "normal"
    ESCAPE = "escape"


def saddle_monitor(loss_history: Sequence[float], window: int = 15, rel_threshold: float = 1e-4) -> SaddleStatus:
    """Escape when the loss moved by less than ``rel_threshold`` (relative) across the last ``window`` epochs."""
    if not loss_history:
        raise ValueError("saddle_monitor: empty loss history")
    if len(loss_history) < window:
        return SaddleStatus.NORMAL
    first, last = float(loss_history[-window]), float(loss_history[-1])
    if first == 0.0:
        # a loss that is already zero is converged, not stuck
        return SaddleStatus.NORMAL
    if abs((first - last) / first) < rel_threshold:
        return SaddleStatus.ESCAPE
    return SaddleStatus.NORMAL


@dataclass
class LearningRateSchedule:
    """Base learning rate with temporary escape bursts.

    Call :meth:`record` with each finished epoch's training loss; :attr:`lr` is
    the rate to use for the next epoch. A burst lasts ``escape_duration``
    epochs, after which the base rate returns and the stagnation window starts
    afresh.
    """

    base_lr: float
    saddle: SaddleConfig = field(default_factory=SaddleConfig)
    enabled: bool = True
    history: list[float] = field(default_factory=list)
    escape_left: int = 0
    window_start: int = 0

    @property
    def escaping(self) -> bool:
        return self.escape_left > 0

    @property
    def lr(self) -> float:
        return self.saddle.escape_lr if self.escaping else self.base_lr

    def record(self, loss: float) -> SaddleStatus:
        self.history.append(float(loss))
        if self.escape_left > 0:
            self.escape_left -= 1
            if self.escape_left == 0:
                self.window_start = len(self.history)
            return SaddleStatus.ESCAPE
        recent = self.history[self.window_start :]
        if self.enabled and saddle_monitor(recent, self.saddle.window, self.saddle.rel_threshold) is SaddleStatus.ESCAPE:
            self.escape_left = self.saddle.escape_duration
            return SaddleStatus.ESCAPE
        return SaddleStatus.NORMAL

    def state(self) -> dict:
        return {"history": self.history, "escape_left": self.escape_left, "window_start": self.window_start}

    def load(self, state: dict) -> None:
        self.history = [float(v) for v in state["history"]]
        self.escape_left = int(state["escape_left"])
        self.window_start = int(state["window_start"])


@dataclass(frozen=True)
class TrainSchedule:
    phase: str
    learning_rate: float
    epochs: int
    batch_size: int
    saddle_escape: bool = False
    saddle_window: int = 15
    saddle_escape_lr: float = 5e-4

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}; expected one of {PHASES}")
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("learning_rate, epochs and batch_size must be positive")
        if self.saddle_window < 1 or self.saddle_escape_lr <= 0:
            raise ValueError("saddle window and escape rate must be positive")

    @classmethod
    def from_config(cls, cfg: Config, phase: str) -> TrainSchedule:
        s = cfg.schedule(phase)
        return cls(phase, s.learning_rate, s.epochs, s.batch_size, s.saddle_escape, cfg.saddle.window, cfg.saddle.escape_lr)


# -- dataset split -----------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[int, ...]
    validation: tuple[int, ...]
    test: tuple[int, ...]
    seed: int

    @property
    def n(self) -> int:
        return len(self.train) + len(self.validation) + len(self.test)

    def to_json(self) -> dict:
        return {"seed": self.seed, "train": list(self.train), "validation": list(self.validation), "test": list(self.test)}

    @classmethod
    def from_json(cls, obj: dict) -> DatasetSplit:
        return cls(tuple(obj["train"]), tuple(obj["validation"]), tuple(obj["test"]), int(obj["seed"]))

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> DatasetSplit:
        return cls.from_json(json.loads(Path(path).read_text()))


def split_dataset(n: int, seed: int) -> DatasetSplit:
    """Seeded shuffle into floor(70%) train, floor(15%) validation and the rest test."""
    if n < 3:
        raise ValueError(f"split_dataset needs at least 3 items, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(0.7 * n))
    n_val = int(np.floor(0.15 * n))
    as_tuple = lambda a: tuple(int(i) for i in a)  # noqa: E731
    return DatasetSplit(as_tuple(order[:n_train]), as_tuple(order[n_train : n_train + n_val]), as_tuple(order[n_train + n_val :]), seed)


def workdir_split(workdir: str | os.PathLike, n: int, seed: int) -> DatasetSplit:
    """The split stored in ``workdir``, created on first use so every step shares it."""
    path = Path(workdir) / SPLIT_FILE
    if path.exists():
        split = DatasetSplit.load(path)
        if split.n != n:
            raise ValueError(f"{path} covers {split.n} scenes but the corpus has {n}")
        return split
    split = split_dataset(n, seed)
    Path(workdir).mkdir(parents=True, exist_ok=True)
    split.save(path)
    return split


# -- generic optimisation loop -----------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    split: str
    loss: float
    lr: float
    escape: bool
    metric: float

    def row(self) -> list[str]:
        return [str(self.epoch), self.split, repr(self.loss), repr(self.lr), str(int(self.escape)), repr(self.metric)]


@dataclass
class FitResult:
    params: ModelParams  # best-on-validation values
    log: list[EpochRecord]
    best_epoch: int
    best_metric: float


def write_log(path: str | os.PathLike, log: Sequence[EpochRecord]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for rec in log:
        w.writerow(rec.row())
    Path(path).write_text(buf.getvalue())


def _state_stem(workdir, name: str) -> Path:
    """Resumable optimiser state lives in ``workdir/state/<name>.{cccp,json}``."""
    d = Path(workdir) / "state"
    d.mkdir(parents=True, exist_ok=True)
    return d / name


def _save_state(stem: Path, params: ModelParams, best: dict[str, np.ndarray], adam: AdamState, meta: dict) -> None:
    entries = [(f"param/{n}", t.data) for n, t in params]
    entries += [(f"best/{n}", a) for n, a in best.items()]
    entries += [(f"m1/{n}", a) for n, a in adam.first_moment.items()]
    entries += [(f"m2/{n}", a) for n, a in adam.second_moment.items()]
    write_checkpoint(stem.with_suffix(".cccp"), entries)
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=1) + "\n")


def _load_state(stem: Path, params: ModelParams, adam: AdamState) -> tuple[dict[str, np.ndarray], dict]:
    arrays = read_checkpoint(stem.with_suffix(".cccp"))
    meta = json.loads(stem.with_suffix(".json").read_text())
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "best": {}, "m1": {}, "m2": {}}
    for key, arr in arrays.items():
        kind, name = key.split("/", 1)
        groups[kind][name] = arr
    params.load_state(groups["param"])
    adam.first_moment = dict(groups["m1"])
    adam.second_moment = dict(groups["m2"])
    adam.step = int(meta["adam_step"])
    return groups["best"], meta


def fit(
    params: ModelParams,
    n_train: int,
    batch_loss: Callable[[np.ndarray], Tensor],
    validate: Callable[[], tuple[float, float]],
    schedule: TrainSchedule,
    saddle: SaddleConfig,
    seed: int,
    stream: int,
    higher_is_better: bool,
    state_stem: Path | None = None,
    resume: bool = False,
) -> FitResult:
    """Minibatch Adam over ``n_train`` items, keeping the best epoch by ``validate``.

    ``batch_loss(indices)`` returns the loss of one minibatch; ``validate()``
    returns ``(validation loss, selection metric)``. Epoch ``e`` shuffles with
    the generator seeded by ``(seed, stream, e)``, so a resumed run replays the
    uninterrupted one exactly.
    """
    adam = AdamState.for_params(params, schedule.learning_rate)
    lr_sched = LearningRateSchedule(schedule.learning_rate, SaddleConfig(**{**asdict(saddle), "window": schedule.saddle_window, "escape_lr": schedule.saddle_escape_lr}), schedule.saddle_escape)
    log: list[EpochRecord] = []
    best = {n: t.data.copy() for n, t in params}
    best_epoch, best_metric = 0, -np.inf if higher_is_better else np.inf
    start = 0
    if resume and state_stem is not None and state_stem.with_suffix(".json").exists():
        best_arrays, meta = _load_state(state_stem, params, adam)
        best = {n: a.astype(params[n].data.dtype) for n, a in best_arrays.items()}
        start = int(meta["epoch"])
        best_epoch, best_metric = int(meta["best_epoch"]), float(meta["best_metric"])
        lr_sched.load(meta["schedule"])
        log = [EpochRecord(**r) for r in meta["log"]]

    for epoch in range(start + 1, schedule.epochs + 1):
        escaping = lr_sched.escaping
        adam.learning_rate = lr_sched.lr
        order = np.random.default_rng([seed, stream, epoch]).permutation(n_train)
        total = 0.0
        for lo in range(0, n_train, schedule.batch_size):
            idx = order[lo : lo + schedule.batch_size]
            params.zero_grad()
            loss = batch_loss(idx)
            backward(loss)
            adam_step(params, adam)
            total += loss.item() * len(idx)
        train_loss = total / n_train
        lr_sched.record(train_loss)
        val_loss, metric = validate()
        log.append(EpochRecord(epoch, "train", train_loss, adam.learning_rate, escaping, float("nan")))
        log.append(EpochRecord(epoch, "validation", val_loss, adam.learning_rate, escaping, metric))
        improved = metric > best_metric if higher_is_better else metric < best_metric
        if improved:
            best = {n: t.data.copy() for n, t in params}
            best_epoch, best_metric = epoch, float(metric)

    if state_stem is not None:
        meta = {
            "epoch": schedule.epochs,
            "adam_step": adam.step,
            "best_epoch": best_epoch,
            "best_metric": best_metric,
            "schedule": lr_sched.state(),
            "log": [asdict(r) for r in log],
        }
        _save_state(state_stem, params, best, adam, meta)
    out = ModelParams((n, Tensor(best[n])) for n in params.names())
    return FitResult(out, log, best_epoch, best_metric)


# -- per-scene training data ---------------------------------------------------------


@dataclass
class SceneArrays:
    """Everything the map-level phases need from one scene (maps at 1/4 resolution)."""

    image: np.ndarray
    gt_sit: np.ndarray
    gt_stand: np.ndarray
    det_sit: np.ndarray
    det_stand: np.ndarray
    crowd: np.ndarray | None = None

    @property
    def gt_total(self) -> np.ndarray:
        return self.gt_sit + self.gt_stand

    @property
    def det_total(self) -> np.ndarray:
        return self.det_sit + self.det_stand


def scene_arrays(corpus: Corpus, indices: Sequence[int], classifier: ClassifierModel, cfg: Config) -> list[SceneArrays]:
    out = []
    for i in indices:
        scene = corpus.scene(int(i))
        gt_sit, gt_stand = render_categories(scene.annotations, scene.size, DOWNSAMPLE, cfg.kernel)
        det_sit, det_stand, _, _ = detection_maps(scene.detections, classifier, scene.size, cfg)
        out.append(SceneArrays(scene.image, gt_sit.grid, gt_stand.grid, det_sit.grid, det_stand.grid))
    return out


def attach_crowd_maps(items: list[SceneArrays], model: Phase2Model) -> None:
    for group in _by_shape(range(len(items)), items):
        maps = crowd_maps(model, [items[i].image for i in group], [items[i].det_total for i in group])
        for i, m in zip(group, maps):
            items[i].crowd = m


def _by_shape(indices, items: Sequence[SceneArrays]) -> list[list[int]]:
    groups: dict[tuple[int, int], list[int]] = {}
    for i in indices:
        groups.setdefault(items[int(i)].image.shape, []).append(int(i))
    return list(groups.values())


def _stack(arrays) -> Tensor:
    return Tensor(np.stack([np.asarray(a)[None] for a in arrays]))


def _total(terms: list[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


def phase2_batch_loss(model: Phase2Model, items: Sequence[SceneArrays], idx, cfg: LossConfig) -> Tensor:
    n = len(idx)
    terms = []
    for group in _by_shape(idx, items):
        sel = [items[i] for i in group]
        final, reg = model.forward(_stack([s.image for s in sel]), _stack([s.det_total for s in sel]))
        terms.append(phase2_loss(final, reg, _stack([s.gt_total for s in sel]), cfg, n))
    return _total(terms)


def phase3_batch_loss(model: Phase3Model, items: Sequence[SceneArrays], idx, cfg: LossConfig, branch: str | None = None) -> Tensor:
    """Joint loss, or with ``branch`` set the pre-training loss of that branch's primary map."""
    n = len(idx)
    terms = []
    for group in _by_shape(idx, items):
        sel = [items[i] for i in group]
        small = avgpool_down(_stack([s.image for s in sel]), DOWNSAMPLE)
        crowd = _stack([s.crowd for s in sel])
        sit, stand = _stack([s.det_sit for s in sel]), _stack([s.det_stand for s in sel])
        if branch == "sit":
            terms.append(weighted_mse(model.primary("sit", sit, crowd, small), _stack([s.gt_sit for s in sel]), cfg.sigma_sit, n))
        elif branch == "stand":
            terms.append(weighted_mse(model.primary("stand", stand, crowd, small), _stack([s.gt_stand for s in sel]), cfg.sigma_stand, n))
        else:
            f_sit, f_stand = model.forward(sit, stand, crowd, small)
            terms.append(phase3_joint_loss(f_sit, f_stand, _stack([s.gt_sit for s in sel]), _stack([s.gt_stand for s in sel]), cfg, n))
    return _total(terms)


def _map_validator(items: Sequence[SceneArrays], batch_loss, batch_size: int, predicted_total) -> Callable[[], tuple[float, float]]:
    """Validation loss per image and its mean absolute total-count error."""

    def run() -> tuple[float, float]:
        if not items:
            return float("nan"), float("nan")
        with no_grad():
            loss = 0.0
            for lo in range(0, len(items), batch_size):
                idx = np.arange(lo, min(lo + batch_size, len(items)))
                loss += batch_loss(idx).item() * len(idx)
            err = [abs(predicted_total(s) - float(np.sum(s.gt_total, dtype=np.float64))) for s in items]
        return loss / len(items), float(np.mean(err))

    return run


# -- the staged driver ---------------------------------------------------------------


@dataclass
class PhaseResult:
    phase: str
    checkpoints: list[Path]
    fits: dict[str, FitResult]


def _records(corpus: Corpus, indices: Sequence[int]) -> tuple[list[KeypointRecord], np.ndarray]:
    records, labels = [], []
    for i in indices:
        scene = corpus.scene(int(i))
        for rec, lab in zip(scene.detections, scene.detection_labels):
            if lab is None:
                continue
            records.append(rec)
            labels.append(1.0 if lab is Category.STANDING else 0.0)
    return records, np.asarray(labels)


def _train_phase1(corpus, split, cfg, workdir, seed, resume) -> PhaseResult:
    model = new_classifier(cfg)
    rec_tr, y_tr = _records(corpus, split.train)
    rec_va, y_va = _records(corpus, split.validation)
    if not rec_tr:
        raise ValueError("no labelled detections in the training scenes")
    x_tr, x_va = feature_matrix(rec_tr), feature_matrix(rec_va)

    def batch_loss(idx):
        return bce_loss(model.forward(Tensor(x_tr[idx])), y_tr[idx])

    def validate():
        x, y = (x_va, y_va) if len(rec_va) else (x_tr, y_tr)
        with no_grad():
            p = model.forward(Tensor(x))
            loss = bce_loss(p, y).item()
        acc = float(np.mean((p.data[:, 0] >= 0.5) == (y >= 0.5)))
        return loss, acc

    sched = TrainSchedule.from_config(cfg, "1")
    res = fit(model.params, len(rec_tr), batch_loss, validate, sched, cfg.saddle, seed, 1, True, _state_stem(workdir, "phase1"), resume)
    path = Path(workdir) / PHASE1_FILE
    save_params(path, res.params)
    write_log(Path(workdir) / "phase1.log.csv", res.log)
    return PhaseResult("1", [path], {"phase1": res})


def _train_phase2(corpus, split, cfg, workdir, seed, resume) -> PhaseResult:
    classifier = load_classifier(workdir, cfg)
    train = scene_arrays(corpus, split.train, classifier, cfg)
    val = scene_arrays(corpus, split.validation, classifier, cfg)
    model = new_phase2(cfg)
    sched = TrainSchedule.from_config(cfg, "2")

    def predicted_total(s):
        return float(np.sum(crowd_maps(model, [s.image], [s.det_total])[0], dtype=np.float64))

    validate = _map_validator(val or train, lambda idx: phase2_batch_loss(model, val or train, idx, cfg.loss), sched.batch_size, predicted_total)
    res = fit(
        model.params,
        len(train),
        lambda idx: phase2_batch_loss(model, train, idx, cfg.loss),
        validate,
        sched,
        cfg.saddle,
        seed,
        2,
        False,
        _state_stem(workdir, "phase2"),
        resume,
    )
    path = Path(workdir) / PHASE2_FILE
    save_params(path, res.params)
    write_log(Path(workdir) / "phase2.log.csv", res.log)
    return PhaseResult("2", [path], {"phase2": res})


def _phase3_data(corpus, split, cfg, workdir) -> tuple[list[SceneArrays], list[SceneArrays]]:
    classifier = load_classifier(workdir, cfg)
    phase2 = load_phase2(workdir, cfg)
    train = scene_arrays(corpus, split.train, classifier, cfg)
    val = scene_arrays(corpus, split.validation, classifier, cfg)
    attach_crowd_maps(train, phase2)
    attach_crowd_maps(val, phase2)
    return train, val


def _train_phase3_pre(corpus, split, cfg, workdir, seed, resume) -> PhaseResult:
    require(workdir, PHASE1_FILE)
    require(workdir, PHASE2_FILE)
    train, val = _phase3_data(corpus, split, cfg, workdir)
    model = new_phase3(cfg)
    sched = TrainSchedule.from_config(cfg, "3-pre")
    paths, fits = [], {}
    for stream, (branch, fname) in enumerate((("sit", PHASE3_SIT_PRE_FILE), ("stand", PHASE3_STAND_PRE_FILE)), start=3):
        params = model.branch(branch, include_final=False)
        gt_of = (lambda s: s.gt_sit) if branch == "sit" else (lambda s: s.gt_stand)
        vitems = val or train

        def predicted(s, branch=branch):
            with no_grad():
                small = avgpool_down(_stack([s.image]), DOWNSAMPLE)
                cat = _stack([s.det_sit if branch == "sit" else s.det_stand])
                m = model.primary(branch, cat, _stack([s.crowd]), small)
            return float(np.sum(m.data, dtype=np.float64))

        def validate(branch=branch, vitems=vitems, gt_of=gt_of, predicted=predicted):
            with no_grad():
                loss = 0.0
                for lo in range(0, len(vitems), sched.batch_size):
                    idx = np.arange(lo, min(lo + sched.batch_size, len(vitems)))
                    loss += phase3_batch_loss(model, vitems, idx, cfg.loss, branch).item() * len(idx)
            err = [abs(predicted(s) - float(np.sum(gt_of(s), dtype=np.float64))) for s in vitems]
            return loss / len(vitems), float(np.mean(err))

        name = fname.removesuffix(".cccp")
        res = fit(
            params,
            len(train),
            lambda idx, branch=branch: phase3_batch_loss(model, train, idx, cfg.loss, branch),
            validate,
            sched,
            cfg.saddle,
            seed,
            stream,
            False,
            _state_stem(workdir, name),
            resume,
        )
        path = Path(workdir) / fname
        save_params(path, res.params)
        write_log(Path(workdir) / f"{name}.log.csv", res.log)
        paths.append(path)
        fits[name] = res
    return PhaseResult("3-pre", paths, fits)


def _train_phase3_joint(corpus, split, cfg, workdir, seed, resume) -> PhaseResult:
    sit_path = require(workdir, PHASE3_SIT_PRE_FILE)
    stand_path = require(workdir, PHASE3_STAND_PRE_FILE)
    require(workdir, PHASE1_FILE)
    require(workdir, PHASE2_FILE)
    model = new_phase3(cfg)
    # the pre-trained branches carry everything except the post-crossing layers
    model.params.load_state(read_checkpoint(sit_path), strict=False)
    model.params.load_state(read_checkpoint(stand_path), strict=False)
    train, val = _phase3_data(corpus, split, cfg, workdir)
    sched = TrainSchedule.from_config(cfg, "3-joint")

    def predicted_total(s):
        with no_grad():
            small = avgpool_down(_stack([s.image]), DOWNSAMPLE)
            f_sit, f_stand = model.forward(_stack([s.det_sit]), _stack([s.det_stand]), _stack([s.crowd]), small)
        return float(np.sum(f_sit.data, dtype=np.float64) + np.sum(f_stand.data, dtype=np.float64))

    vitems = val or train
    validate = _map_validator(vitems, lambda idx: phase3_batch_loss(model, vitems, idx, cfg.loss), sched.batch_size, predicted_total)
    res = fit(
        model.params,
        len(train),
        lambda idx: phase3_batch_loss(model, train, idx, cfg.loss),
        validate,
        sched,
        cfg.saddle,
        seed,
        5,
        False,
        _state_stem(workdir, "phase3"),
        resume,
    )
    path = Path(workdir) / PHASE3_FILE
    save_params(path, res.params)
    write_log(Path(workdir) / "phase3.log.csv", res.log)
    return PhaseResult("3-joint", [path], {"phase3": res})


_RUNNERS = {"1": _train_phase1, "2": _train_phase2, "3-pre": _train_phase3_pre, "3-joint": _train_phase3_joint}


def run_phase(
    phase: str,
    corpus: Corpus,
    workdir: str | os.PathLike,
    cfg: Config,
    seed: int | None = None,
    resume: bool = False,
    split: DatasetSplit | None = None,
) -> PhaseResult:
    """Train one step, reading upstream checkpoints from and writing results to ``workdir``.

    The split comes from ``workdir/split.json`` (created from ``seed`` when
    absent) unless passed explicitly. Only training and validation scenes are
    ever loaded.
    """
    if phase not in _RUNNERS:
        raise ValueError(f"unknown phase {phase!r}; expected one of {PHASES}")
    seed = cfg.seed if seed is None else seed
    Path(workdir).mkdir(parents=True, exist_ok=True)
    if phase == "3-joint":
        # fail on ordering before any data is touched
        require(workdir, PHASE3_SIT_PRE_FILE)
        require(workdir, PHASE3_STAND_PRE_FILE)
    if phase in ("2", "3-pre"):
        require(workdir, PHASE1_FILE)
    if phase == "3-pre":
        require(workdir, PHASE2_FILE)
    if split is None:
        split = workdir_split(workdir, len(corpus), seed)
    with precision(cfg.precision):
        return _RUNNERS[phase](corpus, split, cfg, workdir, seed, resume)


__all__ = [
    "DatasetSplit",
    "FitResult",
    "LearningRateSchedule",
    "MissingArtifactError",
    "PHASES",
    "PhaseResult",
    "SaddleStatus",
    "SceneArrays",
    "TrainSchedule",
    "fit",
    "phase2_loss",
    "phase3_joint_loss",
    "run_phase",
    "saddle_monitor",
    "split_dataset",
    "weighted_mse",
    "workdir_split",
]
