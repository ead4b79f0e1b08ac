"""Datasets, next-step loss, the training loop, rollout metrics and weight transfer."""
from __future__ import annotations

import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, backward
from .graph import FeatureScales
from .model import (ArchitectureConfig, GraphHierarchy, IncompatibleArchitecture, MultiscaleModel,
                    build_hierarchy, forward, rollout)
from .nn import AdamState, adam_step
from .records import Frame, SimulationRecord, load_record, mirror_record

RECORD_SUFFIX = ".simrec"


class NonFiniteLoss(FloatingPointError):
    pass


class FrameMisaligned(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Record files tagged with a split; ``shuffle_seed`` fixes visiting order."""

    paths: tuple[str, ...]
    split: str = "train"
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError(f"unknown split {self.split!r}")
        object.__setattr__(self, "paths", tuple(sorted(str(p) for p in self.paths)))

    @classmethod
    def from_dir(cls, directory: str | os.PathLike, split: str = "train", shuffle_seed: int = 0) -> "Dataset":
        d = Path(directory)
        if not d.is_dir():
            raise EmptyDataset(f"{d} is not a directory")
        paths = sorted(str(p) for p in d.glob(f"*{RECORD_SUFFIX}"))
        if not paths:
            raise EmptyDataset(f"no {RECORD_SUFFIX} files in {d}")
        return cls(tuple(paths), split, shuffle_seed)

    def load(self) -> list[SimulationRecord]:
        return [load_record(p) for p in self.paths]

    @property
    def names(self) -> list[str]:
        return [Path(p).stem for p in self.paths]


def split_dataset(paths, n_test: int, seed: int = 0) -> tuple[Dataset, Dataset]:
    paths = sorted(str(p) for p in paths)
    if not 0 <= n_test <= len(paths):
        raise ValueError("n_test out of range")
    order = np.random.default_rng(seed).permutation(len(paths))
    test = [paths[i] for i in order[:n_test]]
    train = [paths[i] for i in order[n_test:]]
    return Dataset(tuple(train), "train", seed), Dataset(tuple(test), "test", seed)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0
    lr_min: float | None = None  # cosine decay from lr to lr_min over the run when set

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if len(self.weights) != 3 or min(self.weights) < 0 or max(self.weights) == 0:
            raise ValueError("loss weights must be three non-negative numbers, not all zero")
        if self.lr_min is not None and not 0 <= self.lr_min <= self.lr:
            raise ValueError("lr_min must lie in [0, lr]")

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during ``epoch`` (1-based)."""
        if self.lr_min is None or self.epochs <= 1:
            return self.lr
        frac = (epoch - 1) / (self.epochs - 1)
        return self.lr_min + 0.5 * (self.lr - self.lr_min) * (1 + math.cos(math.pi * frac))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = list(self.weights)
        return d


def fit_scales(records: list[SimulationRecord]) -> FeatureScales:
    """Side length from the domain, displacement scale from the largest nodal displacement."""
    if not records:
        raise EmptyDataset("cannot fit scales without records")
    peak = max(float(np.max(np.abs(np.concatenate([f.u, f.v])))) for r in records for f in r.frames)
    return FeatureScales(records[0].spec.side_length, peak if peak > 0 else 1.0)


def aligned_target(frame_t: Frame, frame_next: Frame) -> np.ndarray:
    """Next-frame ``(phi, u, v)`` on the vertices of ``frame_t``'s mesh."""
    if frame_t.mesh.spec != frame_next.mesh.spec:
        raise FrameMisaligned("frames live on different domains")
    return frame_next.mesh.transfer(frame_next.fields(), frame_t.mesh)


@dataclass(eq=False)
class Sample:
    """Precomputed input hierarchy and normalized target for one frame pair."""

    hierarchy: GraphHierarchy
    target: np.ndarray
    origin: tuple[int, int] = (0, 0)


def make_sample(model: MultiscaleModel, frame_t: Frame, frame_next: Frame, origin=(0, 0)) -> Sample:
    target = aligned_target(frame_t, frame_next)
    target[:, 1:] /= model.scales.displacement
    h = build_hierarchy(frame_t.mesh, frame_t.phi, frame_t.u, frame_t.v, frame_t.load,
                        model.config, model.scales)
    return Sample(h, target, origin)


def make_samples(model: MultiscaleModel, records: list[SimulationRecord]) -> list[Sample]:
    out = []
    for r, rec in enumerate(records):
        for t in range(rec.n_frames - 1):
            out.append(make_sample(model, rec.frames[t], rec.frames[t + 1], (r, t)))
    return out


def weighted_mse(pred: Tensor, target: np.ndarray, weights=(1.0, 1.0, 1.0)) -> Tensor:
    if pred.shape != target.shape:
        raise FrameMisaligned(f"prediction {pred.shape} and target {target.shape} differ")
    diff = pred - target
    w = np.asarray(weights, dtype=np.float64) / pred.shape[0]
    return (diff.square() * w).sum()


def sample_loss(model: MultiscaleModel, sample: Sample, weights=(1.0, 1.0, 1.0)) -> Tensor:
    # loss on the unclamped crack output so that gradients survive outside [0, 1]
    return weighted_mse(forward(model, sample.hierarchy, clamp=False), sample.target, weights)


def one_step_loss(model: MultiscaleModel, frame_t: Frame, frame_next: Frame,
                  weights=(1.0, 1.0, 1.0)) -> Tensor:
    """Weighted per-field MSE of the next-step prediction, displacements normalized."""
    return sample_loss(model, make_sample(model, frame_t, frame_next), weights)


@dataclass
class TrainResult:
    history: list[tuple[int, float, float]] = field(default_factory=list)
    epochs_to_target: int | None = None

    @property
    def initial_loss(self) -> float:
        return self.history[0][1]

    @property
    def final_loss(self) -> float:
        return self.history[-1][1]


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> None:
    if not max_norm or max_norm <= 0:
        return
    total = math.sqrt(math.fsum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale


def train(model: MultiscaleModel, records: list[SimulationRecord], cfg: TrainConfig,
          frozen: tuple[str, ...] = (), target_ratio: float | None = None,
          target_loss: float | None = None, stop_at_target: bool = False,
          log=None, samples: list[Sample] | None = None) -> TrainResult:
    """Adam on consecutive-frame pairs, one update per pair, in a seeded shuffled order.

    History row 0 is the mean loss of the untouched model; row ``e`` is the
    mean loss seen during epoch ``e``.  The loss target is ``target_loss`` if
    given, else ``target_ratio`` times the row-0 loss.  Parameters whose name
    starts with any prefix in ``frozen`` are never updated.
    """
    if samples is None:
        if not records:
            raise EmptyDataset("training needs at least one record")
        samples = make_samples(model, records)
    if not samples:
        raise EmptyDataset("training records hold no consecutive frame pairs")
    params = model.named_parameters()
    trainable = {k: p for k, p in params.items() if not any(k.startswith(f) for f in frozen)}
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    result = TrainResult()
    t0 = time.perf_counter()

    initial = math.fsum(float(sample_loss(model, s, cfg.weights).data) for s in samples) / len(samples)
    if not math.isfinite(initial):
        raise NonFiniteLoss(f"initial loss is {initial}")
    result.history.append((0, initial, time.perf_counter() - t0))
    if target_loss is None and target_ratio is not None:
        target_loss = target_ratio * initial
    if log:
        log(0, initial)

    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        losses = []
        for i in rng.permutation(len(samples)):
            model.zero_grad()
            loss = sample_loss(model, samples[i], cfg.weights)
            value = float(loss.data)
            if not math.isfinite(value):
                r, t = samples[i].origin
                raise NonFiniteLoss(f"loss became {value} at epoch {epoch}, record {r}, frame {t}")
            losses.append(value)
            backward(loss)
            grads = {k: p.grad for k, p in trainable.items() if p.grad is not None}
            _clip(grads, cfg.clip_norm)
            if lr > 0:
                adam_step(trainable, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
        mean = math.fsum(losses) / len(losses)
        result.history.append((epoch, mean, time.perf_counter() - t0))
        if log:
            log(epoch, mean)
        if target_loss is not None and result.epochs_to_target is None and mean <= target_loss:
            result.epochs_to_target = epoch
            if stop_at_target:
                break
    model.zero_grad()
    return result


def loss_csv(history: list[tuple[int, float, float]]) -> str:
    lines = ["epoch,mean_loss,wall_seconds"]
    lines += [f"{e},{loss!r},{wall:.6f}" for e, loss, wall in history]
    return "\n".join(lines) + "\n"


# -- evaluation ---------------------------------------------------------------

EPS_REL = 0.01
FIELDS = ("phi", "u", "v")


@dataclass(frozen=True)
class EvalResult:
    record: str
    phi_error_pct: float
    u_error_pct: float
    v_error_pct: float
    per_step: tuple[tuple[float, float, float], ...] = ()

    def row(self) -> tuple:
        return (self.record, self.phi_error_pct, self.u_error_pct, self.v_error_pct)


def field_floors(truth: list[np.ndarray], eps_rel: float = EPS_REL) -> np.ndarray:
    """Denominator floor per field: ``eps_rel`` times the field's range over all frames.

    A field that is constant over the whole record gets ``eps_rel`` itself.
    """
    allv = np.concatenate([np.asarray(t, dtype=np.float64).reshape(-1, 3) for t in truth])
    span = allv.max(axis=0) - allv.min(axis=0)
    return np.where(span > 0, eps_rel * span, eps_rel)


def step_errors(pred: np.ndarray, true: np.ndarray, floors: np.ndarray) -> np.ndarray:
    """Mean over vertices of the percent error per field, for one time step."""
    denom = np.maximum(np.abs(true), floors)
    return 100.0 * np.mean(np.abs(pred - true) / denom, axis=0)


def percent_errors(pred: list[np.ndarray], truth: list[np.ndarray],
                   eps_rel: float = EPS_REL) -> tuple[np.ndarray, np.ndarray]:
    """Per-field error averaged over vertices, then over steps ``1..T``.

    ``pred[t]`` and ``truth[t]`` are ``(n_t, 3)`` arrays of ``(phi, u, v)`` on
    the same vertices; index 0 is the shared initial frame, which only
    enters through the field ranges.  Returns ``(means, per_step)``.
    """
    if len(pred) != len(truth):
        raise FrameMisaligned(f"{len(pred)} predicted frames for {len(truth)} true frames")
    floors = field_floors(truth, eps_rel)
    steps = []
    for t in range(1, len(truth)):
        if pred[t].shape != truth[t].shape:
            raise FrameMisaligned(f"step {t}: prediction {pred[t].shape} vs truth {truth[t].shape}")
        steps.append(step_errors(pred[t], truth[t], floors))
    if not steps:
        return np.zeros(3), np.zeros((0, 3))
    arr = np.array(steps)
    return np.array([math.fsum(arr[:, n]) / len(arr) for n in range(3)]), arr


def errors_against(pred_frames: list[Frame], record: SimulationRecord, name: str = "",
                   eps_rel: float = EPS_REL) -> EvalResult:
    """Percent errors of predicted frames against a ground-truth record.

    Predictions are carried onto each ground-truth mesh before comparison.
    """
    truth = [f.fields() for f in record.frames]
    pred = [p.mesh.transfer(p.fields(), f.mesh) for p, f in zip(pred_frames, record.frames)]
    means, steps = percent_errors(pred, truth, eps_rel)
    return EvalResult(name, *(float(m) for m in means), tuple(tuple(float(x) for x in s) for s in steps))


def open_loop_frames(model: MultiscaleModel, record: SimulationRecord) -> list[Frame]:
    from .model import predict_fields

    frames = [record.frames[0]]
    for t in range(1, record.n_frames):
        prev = record.frames[t - 1]
        out = predict_fields(model, prev.mesh, prev.phi, prev.u, prev.v, prev.load)
        frames.append(Frame(prev.mesh, out[:, 0], out[:, 1], out[:, 2], prev.load, record.frames[t].applied))
    return frames


def evaluate(model: MultiscaleModel, records: list[SimulationRecord], names: list[str] | None = None,
             open_loop: bool = False, eps_rel: float = EPS_REL) -> list[EvalResult]:
    """Errors per record; closed loop unless ``open_loop``.  Output is sorted by name."""
    names = names or [f"record_{i}" for i in range(len(records))]
    out = []
    for name, rec in sorted(zip(names, records), key=lambda p: p[0]):
        if open_loop:
            frames = open_loop_frames(model, rec)
        else:
            frames = rollout(model, rec, rec.n_frames - 1).frames
        out.append(errors_against(frames, rec, name, eps_rel))
    return out


def metrics_csv(results: list[EvalResult], eps_rel: float = EPS_REL) -> str:
    lines = ["record,phi_error_pct,u_error_pct,v_error_pct"]
    lines += [f"{r.record},{r.phi_error_pct!r},{r.u_error_pct!r},{r.v_error_pct!r}" for r in results]
    if results:
        means = [math.fsum(getattr(r, f"{f}_error_pct") for r in results) / len(results) for f in FIELDS]
        lines.append("mean," + ",".join(repr(m) for m in means))
    return "\n".join(lines) + "\n"


# -- transfer learning and mirroring -------------------------------------------

TRANSFERRED_PREFIXES = ("mlp_in.", "down.0.")


def transfer_weights(source: MultiscaleModel, target_arch: ArchitectureConfig, seed: int = 0) -> MultiscaleModel:
    """Fresh model for ``target_arch`` whose encoder and first downscale MP block
    are copies of ``source``'s."""
    s = source.config
    for attr in ("dm", "heads", "encoder_hidden"):
        if getattr(s, attr) != getattr(target_arch, attr):
            raise IncompatibleArchitecture(f"{attr} differs: {getattr(s, attr)} vs {getattr(target_arch, attr)}")
    target = MultiscaleModel.init(target_arch, source.scales, seed)
    src = source.named_parameters()
    for name, p in target.named_parameters().items():
        if name.startswith(TRANSFERRED_PREFIXES):
            p.data = src[name].data.copy()
    return target


def mirror_dataset(records: list[SimulationRecord]) -> list[SimulationRecord]:
    return [mirror_record(r) for r in records]
