"""Joint optimization of decoder/head parameters and per-shape latents.

Auto-decoding: there is no encoder.  Every training shape owns one latent
row; each optimization step updates the shared network parameters and the
latent of the case that produced the batch.  Per epoch, every case
contributes a jittered uniform grid of query points whose occupancy labels
come from that case's (possibly imperfect) full-resolution mask and whose
appearance comes from the windowed image.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FormatError, NumericError, TrainingAborted
from .model import ArchitectureConfig, backward, init_model, loss, parameter_shapes, query
from .volume import VolumeGrid, jitter, meshgrid, nearest_label, trilinear_sample


@dataclass
class TrainConfig:
    lr: float = 0.001
    epochs: int = 300
    lam: float = 0.01
    train_grid: int = 64
    jitter_sigma: float = 0.01
    points_per_step: int = 16384
    seed: int = 0
    checkpoint_policy: str = "lowest-training-loss"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.checkpoint_policy != "lowest-training-loss":
            raise ValueError(
                f"unsupported checkpoint policy {self.checkpoint_policy!r}")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainingCase:
    case_id: str
    appearance: VolumeGrid
    mask: VolumeGrid

    def __post_init__(self):
        if self.appearance.shape != self.mask.shape:
            raise ValueError(
                f"case {self.case_id}: appearance {self.appearance.shape} and "
                f"mask {self.mask.shape} differ in shape")


@dataclass
class PointBatch:
    points: np.ndarray       # (n, 3) normalized, jitter included
    appearance: np.ndarray   # (n,) in [0, 1]
    labels: np.ndarray       # (n,) in {0, 1}


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class AdamState:
    """Per-tensor first/second moments and step counters."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}


def adam_step(state: AdamState, params: dict, grads: dict, lr: float):
    """Standard Adam with bias correction; updates ``params`` in place."""
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.t[name] = 0
        state.t[name] += 1
        t = state.t[name]
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        p -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)
    return params


# ---------------------------------------------------------------------------
# Epoch sampling
# ---------------------------------------------------------------------------

def sample_epoch_batch(case: TrainingCase, cfg: TrainConfig,
                       rng: np.random.Generator) -> list[PointBatch]:
    """One epoch's worth of labeled query points for a case.

    A train_grid^3 uniform meshgrid is jittered with Gaussian noise, labels
    come from the nearest full-resolution mask voxel, appearance from
    trilinear interpolation of the image.  The points are shuffled and split
    into ``points_per_step`` slices.
    """
    if cfg.train_grid > min(case.mask.shape):
        raise ValueError(
            f"train_grid {cfg.train_grid} exceeds the case resolution {case.mask.shape}")
    pts = jitter(meshgrid(cfg.train_grid), cfg.jitter_sigma, rng)
    labels = nearest_label(case.mask, pts)
    appearance = trilinear_sample(case.appearance, pts)
    order = rng.permutation(len(pts))
    batches = []
    for start in range(0, len(pts), cfg.points_per_step):
        sl = order[start:start + cfg.points_per_step]
        batches.append(PointBatch(pts[sl], appearance[sl], labels[sl]))
    return batches


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "occfield-ckpt-v1"


@dataclass
class Checkpoint:
    arch: ArchitectureConfig
    train_cfg: TrainConfig
    case_ids: list[str]
    tensors: dict[str, np.ndarray]  # parameters plus "latents" (N, c)
    selected_epoch: int
    selected_loss: float
    loss_log: Optional[list] = None  # [(epoch, mean_loss)]; not persisted

    def latent_for(self, case_id: str) -> np.ndarray:
        from .errors import UnknownCaseError
        try:
            row = self.case_ids.index(case_id)
        except ValueError:
            raise UnknownCaseError(f"case {case_id!r} not in checkpoint") from None
        return self.tensors["latents"][row]

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k != "latents"}


def _tensor_order(arch: ArchitectureConfig) -> list[str]:
    return list(parameter_shapes(arch)) + ["latents"]


def save_checkpoint(ckpt: Checkpoint, header_path) -> Path:
    """JSON manifest plus one little-endian f32 blob next to it."""
    header_path = Path(header_path)
    bin_path = header_path.with_suffix(".bin") if header_path.suffix == ".json" \
        else header_path.with_name(header_path.name + ".bin")
    manifest_tensors = {}
    blob = bytearray()
    offset = 0
    for name in _tensor_order(ckpt.arch):
        arr = np.ascontiguousarray(ckpt.tensors[name].astype("<f4", copy=False))
        manifest_tensors[name] = {"offset": offset, "shape": list(arr.shape)}
        blob += arr.tobytes()
        offset += arr.size
    header = {
        "format": CHECKPOINT_FORMAT,
        "arch": ckpt.arch.to_dict(),
        "train": ckpt.train_cfg.to_dict(),
        "case_ids": list(ckpt.case_ids),
        "selected_epoch": int(ckpt.selected_epoch),
        "selected_loss": float(ckpt.selected_loss),
        "tensors": manifest_tensors,
        "data": bin_path.name,
    }
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header_path.write_text(json.dumps(header, sort_keys=True, indent=2) + "\n")
    bin_path.write_bytes(bytes(blob))
    return header_path


def load_checkpoint(header_path) -> Checkpoint:
    header_path = Path(header_path)
    try:
        header = json.loads(header_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad checkpoint header {header_path}: {exc}") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"unknown checkpoint format {header.get('format')!r}")
    arch = ArchitectureConfig.from_dict(header["arch"])
    cfg = TrainConfig.from_dict(header["train"])
    raw = (header_path.parent / header["data"]).read_bytes()
    flat = np.frombuffer(raw, dtype="<f4")
    tensors = {}
    for name, meta in header["tensors"].items():
        shape = tuple(meta["shape"])
        size = int(np.prod(shape))
        tensors[name] = flat[meta["offset"]:meta["offset"] + size].reshape(shape).copy()
    expected = set(_tensor_order(arch))
    if set(tensors) != expected:
        raise FormatError("checkpoint tensor set does not match its architecture")
    return Checkpoint(arch=arch, train_cfg=cfg, case_ids=list(header["case_ids"]),
                      tensors=tensors, selected_epoch=int(header["selected_epoch"]),
                      selected_loss=float(header["selected_loss"]))


# ---------------------------------------------------------------------------
# The training loop
# ---------------------------------------------------------------------------

def train(dataset: list[TrainingCase], cfg: TrainConfig,
          arch: Optional[ArchitectureConfig] = None,
          progress=None) -> Checkpoint:
    """Fit the occupancy field to every case jointly; keep the best epoch.

    Returns the checkpoint whose epoch-mean training loss was lowest.  A
    non-finite loss aborts with TrainingAborted carrying the best checkpoint
    seen so far (None if the first epoch never finished).
    """
    if not dataset:
        raise ValueError("dataset must not be empty")
    arch = arch or ArchitectureConfig()
    rng = np.random.default_rng(cfg.seed)
    params, latents = init_model(arch, len(dataset), rng)
    state = AdamState()
    case_ids = [c.case_id for c in dataset]

    best: Optional[Checkpoint] = None
    log: list[tuple[int, float]] = []

    def snapshot(epoch, mean_loss):
        tensors = {k: v.copy() for k, v in params.items()}
        tensors["latents"] = latents.copy()
        return Checkpoint(arch=arch, train_cfg=cfg, case_ids=case_ids,
                          tensors=tensors, selected_epoch=epoch,
                          selected_loss=mean_loss, loss_log=None)

    for epoch in range(1, cfg.epochs + 1):
        step_losses = []
        for ci, case in enumerate(dataset):
            z = latents[ci]
            for batch in sample_epoch_batch(case, cfg, rng):
                probs, rec = query(params, arch, z, batch.points,
                                   batch.appearance, record=True)
                step_loss = loss(probs, batch.labels, z, cfg.lam)
                if not np.isfinite(step_loss):
                    raise TrainingAborted(
                        f"non-finite loss at epoch {epoch}, case {case.case_id}",
                        checkpoint=best)
                try:
                    grads = backward(params, arch, rec, batch.labels, cfg.lam)
                except NumericError as exc:
                    raise TrainingAborted(
                        f"{exc} at epoch {epoch}, case {case.case_id}",
                        checkpoint=best) from exc
                zgrad = grads.pop("z")
                adam_step(state, params, grads, cfg.lr)
                adam_step(state, {f"latents.row{ci}": z},
                          {f"latents.row{ci}": zgrad}, cfg.lr)
                step_losses.append(step_loss)
        mean_loss = float(np.mean(step_losses))
        log.append((epoch, mean_loss))
        if best is None or mean_loss < best.selected_loss:
            best = snapshot(epoch, mean_loss)
        if progress is not None:
            progress(epoch, mean_loss)

    best.loss_log = log
    return best


def write_loss_log(log, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["epoch,mean_loss"]
    for epoch, mean_loss in log:
        lines.append(f"{epoch},{mean_loss:.8f}")
    path.write_text("\n".join(lines) + "\n")
    return path
