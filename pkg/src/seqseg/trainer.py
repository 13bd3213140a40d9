"""Staged PNet-MSA training, end-to-end BiRNN fine-tuning and evaluation."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from . import losses
from .birnn import BiRNNParams, birnn_forward_stacked
from .checkpoint import load_checkpoint, save_checkpoint  # noqa: F401  (re-exported)
from .metrics import MetricsReport, case_metrics, dsc
from .pnet import ConfigError, PNetParams, check_input_shape, init_unit, pnet_forward
from .synthdata import MaskVolume, Volume, volume_triplets
from .tensor import NumericError, Tensor, backward, no_grad

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.5


@dataclass
class TrainConfig:
    loss: str = "jac"
    lr: float = 0.01
    lr_decay: float = 0.1
    decay_every: int = 40
    momentum: float = 0.9
    batch_size: int = 8
    window: int = 5
    tolerance: float = 1e-3
    max_epochs: int = 30
    min_epochs: int = 1
    seed: int = 0
    K: int = 5
    width: int = 64
    agg_channels: int = 16
    val_fraction: float = 0.2
    # two-phase protocol: after staged training, merge validation into training
    merge_validation: bool = False
    merge_epochs: int = 5
    # BiRNN fine-tuning
    rnn_lr: float = 0.5
    rnn_warmup_epochs: int = 60
    finetune_epochs: int = 2
    finetune_lr: float = 0.001
    finetune_deep_supervision: bool = True
    drop_prob: float = 0.05

    def __post_init__(self):
        if self.loss not in losses.LOSSES:
            raise ValueError(f"unknown loss kind {self.loss!r}")
        for name in ("lr", "tolerance", "rnn_lr", "finetune_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.batch_size < 1 or self.window < 1 or self.max_epochs < 1:
            raise ValueError("batch_size, window and max_epochs must be >= 1")
        if not 0.0 <= self.drop_prob < 1.0:
            raise ValueError("drop_prob must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    def rate(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.decay_every)


@dataclass
class Checkpoint:
    pnet: PNetParams
    birnn: BiRNNParams | None
    config: TrainConfig
    stage: int
    epoch: int
    history: list[tuple] = field(default_factory=list)
    meta: dict = field(default_factory=dict)


class TrainingDiverged(NumericError):
    """Loss became non-finite; ``checkpoint`` holds the last good state."""

    def __init__(self, message: str, checkpoint: Checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


class SGD:
    """Momentum SGD: ``v <- m v - lr g``; ``p <- p + v``."""

    def __init__(self, tensors: Sequence[Tensor], momentum: float):
        self.tensors = list(tensors)
        self.momentum = momentum
        self.velocity = [np.zeros_like(t.data) for t in self.tensors]

    def zero_grad(self) -> None:
        for t in self.tensors:
            t.grad = None

    def step(self, lr: float) -> None:
        for t, v in zip(self.tensors, self.velocity):
            g = 0.0 if t.grad is None else t.grad
            v *= self.momentum
            v -= lr * g
            t.data += v


# --------------------------------------------------------------------------
# data plumbing

Case = tuple[Volume, MaskVolume]


def _cases(dataset) -> list[Case]:
    out = []
    for item in dataset:
        img, mask = (item[1], item[2]) if len(item) == 3 else item
        out.append((img, mask))
    if not out:
        raise ValueError("dataset is empty")
    return out


def split_dataset(n: int, val_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Deterministic train/validation split of ``n`` case indices."""
    if n < 2:
        return list(range(n)), list(range(n))
    order = np.random.default_rng(seed).permutation(n)
    n_val = min(n - 1, max(1, int(round(val_fraction * n))))
    return sorted(order[n_val:].tolist()), sorted(order[:n_val].tolist())


def _slices(cases: Sequence[Case]) -> tuple[np.ndarray, np.ndarray]:
    xs = [volume_triplets(img) for img, _ in cases]
    ys = [mask.voxels[:, None].astype(np.float64) for _, mask in cases]
    return np.concatenate(xs), np.concatenate(ys)


def _snapshot(params: PNetParams) -> list[np.ndarray]:
    return [t.data.copy() for _, t in params.parameters()] + [b.copy() for _, b in params.buffers()]


def _restore(params: PNetParams, snap: list[np.ndarray]) -> None:
    targets = [t.data for _, t in params.parameters()] + [b for _, b in params.buffers()]
    for dst, src in zip(targets, snap):
        dst[...] = src


def predict_cnn(params: PNetParams, x: np.ndarray, n_units: int | None = None, chunk: int = 16) -> np.ndarray:
    """Fused probability maps ``[N,1,H,W]`` for ``[N,3,H,W]`` inputs (inference mode)."""
    out = []
    with no_grad():
        for i in range(0, len(x), chunk):
            out.append(pnet_forward(Tensor(x[i:i + chunk]), params, False, n_units).fused.data)
    return np.concatenate(out)


def validation_loss(params: PNetParams, x: np.ndarray, y: np.ndarray, kind: str, n_units: int | None = None) -> float:
    return losses.batch_loss(kind, predict_cnn(params, x, n_units), y).value


def _train_epoch(params: PNetParams, n_units: int, x: np.ndarray, y: np.ndarray, opt: SGD, lr: float,
                 cfg: TrainConfig, rng: np.random.Generator) -> float:
    order = rng.permutation(len(x))
    total, batches = 0.0, 0
    for start in range(0, len(order), cfg.batch_size):
        idx = np.sort(order[start:start + cfg.batch_size])
        out = pnet_forward(Tensor(x[idx]), params, True, n_units)
        obj = losses.deep_supervision_objective([u.data for u in out.units], out.fused.data, y[idx], cfg.loss)
        if not math.isfinite(obj.value):
            raise NumericError(f"non-finite training loss {obj.value}")
        opt.zero_grad()
        backward([(out.fused, obj.fused_grad)] + list(zip(out.units, obj.unit_grads)))
        opt.step(lr)
        total += obj.value
        batches += 1
    return total / batches


def _converged(vals: Sequence[float], window: int, tol: float) -> bool:
    if len(vals) <= window:
        return False
    before = min(vals[:-window])
    now = min(vals)
    return (before - now) / max(abs(before), 1e-12) < tol


def _run_stage(params, k, x_tr, y_tr, x_va, y_va, cfg, rng, epoch, history, lr_scale, last_good):
    opt = SGD([t for _, t in params.parameters()], cfg.momentum)
    start = validation_loss(params, x_va, y_va, cfg.loss, k)
    vals: list[float] = []
    # the untrained state is a candidate too, so the handoff never regresses
    best, best_snap = start, _snapshot(params)
    for e in range(cfg.max_epochs):
        try:
            tr = _train_epoch(params, k, x_tr, y_tr, opt, cfg.rate(epoch) * lr_scale, cfg, rng)
            va = validation_loss(params, x_va, y_va, cfg.loss, k)
        except NumericError as err:
            raise TrainingDiverged(f"stage {k}, epoch {epoch}: {err}", last_good()) from err
        if not math.isfinite(va):
            raise TrainingDiverged(f"stage {k}, epoch {epoch}: non-finite validation loss", last_good())
        history.append((k, epoch, tr, va))
        log.info("stage %d epoch %d train %.6f val %.6f", k, epoch, tr, va)
        epoch += 1
        vals.append(va)
        if va < best:
            best, best_snap = va, _snapshot(params)
        if e + 1 >= cfg.min_epochs and _converged(vals, cfg.window, cfg.tolerance):
            break
    _restore(params, best_snap)
    return start, best, epoch


def train_staged(dataset, config: TrainConfig | None = None, params: PNetParams | None = None) -> Checkpoint:
    """Train units 1..K one stage at a time.

    Stage ``k`` trains the first ``k`` units end to end under deep
    supervision until the validation loss stops improving by ``tolerance``
    (relative) over ``window`` epochs, or ``max_epochs`` elapse. The best
    validation state of the stage is kept. A stage whose best validation
    loss is worse than the previous handoff is retried once with a fresh
    unit and half the learning rate.
    """
    cfg = config or TrainConfig()
    cases = _cases(dataset)
    tr_idx, va_idx = split_dataset(len(cases), cfg.val_fraction, cfg.seed)
    x_tr, y_tr = _slices([cases[i] for i in tr_idx])
    x_va, y_va = _slices([cases[i] for i in va_idx])
    params = params or PNetParams.create(cfg.K, cfg.width, cfg.agg_channels, 3, seed=cfg.seed)
    check_input_shape(x_tr.shape[1:], params)
    rng = np.random.default_rng(cfg.seed + 1)
    history: list[tuple] = []
    handoffs: list[float] = []
    starts: list[float] = []
    retries: list[int] = []
    epoch = 0

    def last_good():
        return Checkpoint(params, None, cfg, max(1, len(handoffs)), epoch, list(history), {"handoff_val": list(handoffs)})

    for k in range(1, params.K + 1):
        before = _snapshot(params)
        start, best, epoch = _run_stage(params, k, x_tr, y_tr, x_va, y_va, cfg, rng, epoch, history, 1.0,
                                        last_good)
        if not best < start:
            log.warning("stage %d did not improve on %.6f; retrying at half rate", k, start)
            _restore(params, before)
            init_unit(params.units[k - 1], np.random.default_rng([cfg.seed, k, 1]))
            start, best, epoch = _run_stage(params, k, x_tr, y_tr, x_va, y_va, cfg, rng, epoch, history, 0.5,
                                            last_good)
            retries.append(k)
        starts.append(start)
        handoffs.append(best)

    if cfg.merge_validation:
        x_all, y_all = np.concatenate([x_tr, x_va]), np.concatenate([y_tr, y_va])
        opt = SGD([t for _, t in params.parameters()], cfg.momentum)
        for _ in range(cfg.merge_epochs):
            tr = _train_epoch(params, params.K, x_all, y_all, opt, cfg.rate(epoch), cfg, rng)
            va = validation_loss(params, x_va, y_va, cfg.loss)
            history.append(("merged", epoch, tr, va))
            epoch += 1
            if va <= handoffs[-1]:
                break

    return Checkpoint(params, None, cfg, params.K, epoch, history,
                      {"stage_start_val": starts, "handoff_val": handoffs, "retried_stages": retries,
                       "train_cases": tr_idx, "val_cases": va_idx})


def handoff_monotone(checkpoint: Checkpoint) -> bool:
    """Every stage handed off at a validation loss no worse than it started with."""
    starts = checkpoint.meta.get("stage_start_val", [])
    ends = checkpoint.meta.get("handoff_val", [])
    return len(starts) == len(ends) > 0 and all(e <= s for s, e in zip(starts, ends))


# --------------------------------------------------------------------------
# BiRNN fine-tuning

def _drop_mask(t: int, p: float, rng: np.random.Generator) -> np.ndarray:
    keep = np.ones((t, 1, 1, 1))
    if t > 2 and p > 0:
        interior = np.arange(1, t - 1)
        drop = interior[rng.random(len(interior)) < p]
        keep[drop] = 0.0
    return keep


def finetune_birnn(checkpoint: Checkpoint, dataset, config: TrainConfig | None = None) -> Checkpoint:
    """Attach a BiRNN to a trained PNet and fine-tune the stack.

    The BiRNN is first warmed up on fixed CNN outputs (``rnn_warmup_epochs``),
    then CNN and BiRNN are trained jointly on whole-volume sequences for
    ``finetune_epochs``. In both phases interior slices of the CNN output are
    zeroed at random with probability ``drop_prob``. Batch-norm statistics
    stay frozen while fine-tuning. Each phase ends on its epoch with the best
    validation DSC; the warm-up also counts its starting point.
    """
    cfg = config or checkpoint.config
    cases = _cases(dataset)
    tr_idx, va_idx = split_dataset(len(cases), cfg.val_fraction, cfg.seed)
    params = checkpoint.pnet
    birnn = checkpoint.birnn or BiRNNParams.create(cfg.seed + 7)
    rnn_tensors = [t for _, t in birnn.parameters()]
    rng = np.random.default_rng(cfg.seed + 2)
    history = list(checkpoint.history)
    epoch = checkpoint.epoch
    train_vols = [(volume_triplets(cases[i][0]), cases[i][1].voxels[:, None].astype(np.float64)) for i in tr_idx]
    val_vols = [(volume_triplets(cases[i][0]), cases[i][1].voxels[:, None].astype(np.float64)) for i in va_idx]

    def snapshot():
        return Checkpoint(params, birnn, cfg, checkpoint.stage, epoch, list(history), dict(checkpoint.meta))

    def rnn_val(cnn_out=None):
        """Mean validation (loss, DSC at 0.5) of the refined output."""
        total, overlap = 0.0, 0.0
        with no_grad():
            for k, (x, y) in enumerate(val_vols):
                yhat = cnn_out[k] if cnn_out is not None else predict_cnn(params, x)
                ybar = birnn_forward_stacked(yhat, birnn).data
                total += losses.batch_loss(cfg.loss, ybar, y).value
                overlap += dsc(ybar >= 0.5, y)
        return total / len(val_vols), overlap / len(val_vols)

    def keep_best(tensors, val, best):
        # highest validation DSC wins; the loss breaks ties
        key = (-val[1], val[0])
        if best is None or key < best[0]:
            return key, [t.data.copy() for t in tensors]
        return best

    def restore(tensors, best):
        for t, data in zip(tensors, best[1]):
            t.data[...] = data

    # warm-up on cached CNN outputs
    cached = [(predict_cnn(params, x), y) for x, y in train_vols]
    val_cached = [predict_cnn(params, x) for x, _ in val_vols]
    opt = SGD(rnn_tensors, cfg.momentum)
    best = keep_best(rnn_tensors, rnn_val(val_cached), None) if cfg.rnn_warmup_epochs else None
    for _ in range(cfg.rnn_warmup_epochs):
        total = 0.0
        for vi in rng.permutation(len(cached)):
            yhat, y = cached[vi]
            seq = yhat * _drop_mask(len(yhat), cfg.drop_prob, rng)
            out = birnn_forward_stacked(seq, birnn)
            res = losses.batch_loss(cfg.loss, out.data, y)
            if not math.isfinite(res.value):
                raise TrainingDiverged(f"BiRNN warm-up epoch {epoch}: non-finite loss", snapshot())
            opt.zero_grad()
            out.backward(res.grad)
            opt.step(cfg.rnn_lr)
            total += res.value
        va = rnn_val(val_cached)
        history.append(("rnn-warmup", epoch, total / len(cached), va[0]))
        log.info("rnn warm-up epoch %d train %.6f val %.6f dsc %.4f", epoch, total / len(cached), *va)
        best = keep_best(rnn_tensors, va, best)
        epoch += 1
    if best is not None:
        restore(rnn_tensors, best)

    # end-to-end
    cnn_tensors = [t for _, t in params.parameters()]
    opt_cnn = SGD(cnn_tensors, cfg.momentum)
    joint = cnn_tensors + rnn_tensors
    best = None
    for _ in range(cfg.finetune_epochs):
        total = 0.0
        for vi in rng.permutation(len(train_vols)):
            x, y = train_vols[vi]
            out = pnet_forward(Tensor(x), params, False)
            seq = out.fused * _drop_mask(len(x), cfg.drop_prob, rng)
            ybar = birnn_forward_stacked(seq, birnn)
            res = losses.batch_loss(cfg.loss, ybar.data, y)
            seeds = [(ybar, res.grad)]
            value = res.value
            if cfg.finetune_deep_supervision:
                ds = losses.deep_supervision_objective([u.data for u in out.units], out.fused.data, y, cfg.loss)
                seeds += [(out.fused, ds.fused_grad)] + list(zip(out.units, ds.unit_grads))
                value += ds.value
            if not math.isfinite(value):
                raise TrainingDiverged(f"fine-tuning epoch {epoch}: non-finite loss", snapshot())
            opt.zero_grad()
            opt_cnn.zero_grad()
            backward(seeds)
            opt.step(cfg.rnn_lr * cfg.finetune_lr / cfg.lr)
            opt_cnn.step(cfg.finetune_lr)
            total += value
        va = rnn_val()
        history.append(("rnn", epoch, total / len(train_vols), va[0]))
        log.info("fine-tune epoch %d train %.6f val %.6f dsc %.4f", epoch, total / len(train_vols), *va)
        best = keep_best(joint, va, best)
        epoch += 1
    if best is not None:
        restore(joint, best)

    return Checkpoint(params, birnn, cfg, checkpoint.stage, epoch, history, dict(checkpoint.meta))


# --------------------------------------------------------------------------
# inference and evaluation

@dataclass
class VolumePrediction:
    cnn: np.ndarray
    rnn: np.ndarray | None


def predict_volume(checkpoint: Checkpoint, volume: Volume) -> VolumePrediction:
    """Slice-wise CNN probabilities ``[D,H,W]`` and, when a BiRNN is attached, its refinement."""
    x = volume_triplets(volume)
    try:
        check_input_shape(x.shape[1:], checkpoint.pnet)
    except ConfigError:
        raise
    yhat = predict_cnn(checkpoint.pnet, x)
    ybar = None
    if checkpoint.birnn is not None:
        with no_grad():
            ybar = birnn_forward_stacked(yhat, checkpoint.birnn).data[:, 0]
    return VolumePrediction(yhat[:, 0], ybar)


@dataclass
class Evaluation:
    cnn: MetricsReport
    rnn: MetricsReport | None
    predictions: list[VolumePrediction] = field(default_factory=list)

    @property
    def final(self) -> MetricsReport:
        return self.rnn if self.rnn is not None else self.cnn


def _evaluate_one(args):
    checkpoint, case_id, img, mask, threshold = args
    pred = predict_volume(checkpoint, img)
    truth = mask.voxels.astype(bool)
    cnn = case_metrics(case_id, pred.cnn >= threshold, truth, mask.spacing_mm)
    rnn = None if pred.rnn is None else case_metrics(case_id, pred.rnn >= threshold, truth, mask.spacing_mm)
    return cnn, rnn, pred


def evaluate(checkpoint: Checkpoint, dataset, threshold: float = DEFAULT_THRESHOLD, threads: int = 1,
             keep_predictions: bool = False) -> Evaluation:
    """Per-volume metrics of the CNN output and (if present) the BiRNN output.

    ``dataset`` items are ``(image, mask)`` or ``(case_id, image, mask)``.
    With ``threads > 1`` volumes are scored in a process pool; results keep
    dataset order.
    """
    items = []
    for i, item in enumerate(dataset):
        case_id, img, mask = item if len(item) == 3 else (f"case_{i:03d}", *item)
        items.append((checkpoint, case_id, img, mask, threshold))
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_evaluate_one, items))
    else:
        results = [_evaluate_one(a) for a in items]
    cnn = MetricsReport([r[0] for r in results], "cnn")
    rnn = None if checkpoint.birnn is None else MetricsReport([r[1] for r in results], "birnn")
    return Evaluation(cnn, rnn, [r[2] for r in results] if keep_predictions else [])


def write_history_csv(path, history: Sequence[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "epoch", "train_loss", "val_loss"])
        for stage, epoch, tr, va in history:
            w.writerow([stage, epoch, repr(float(tr)), repr(float(va))])


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **{k: v for k, v in kw.items() if v is not None})
