"""Training loop, optimizers, checkpoints and tiled inference.

Iteration bookkeeping follows the one-presentation-per-pair convention: an
epoch over an N-pair dataset advances the iteration counter by exactly N, so
a run logs ``pairs * epochs`` iterations regardless of batch size.

Checkpoint file layout:

    magic "PNBC" | version u16 LE | header length u32 LE |
    header JSON {graph, provenance} | float32 LE weights | CRC-32 u32 LE
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..dataset import TilePairDataset, crop_tiles, stitch_tiles
from ..optics import ImageField
from .graph import GraphError, ModelGraph
from .model import Model

__all__ = [
    "TrainConfig",
    "Checkpoint",
    "TrainingDiverged",
    "CheckpointFormatError",
    "train",
    "train_thetanet",
    "infer",
    "evaluate_loss",
    "save_checkpoint",
    "load_checkpoint",
    "save_history_csv",
]

MAGIC = b"PNBC"
VERSION = 1

OPTIMIZERS = ("adam", "sgd_momentum")
LOSSES = ("mse", "mae")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the iteration where it happened."""


class CheckpointFormatError(ValueError):
    """Raised for malformed or corrupt checkpoint files."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    lr: float = 1e-3
    optimizer: str = "adam"
    loss: str = "mse"
    batch_size: int = 4
    seed: int = 0
    float64: bool = False

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def dtype(self):
        return np.float64 if self.float64 else np.float32


@dataclass
class Checkpoint:
    graph: ModelGraph
    weights: np.ndarray  # flat float32 vector
    provenance: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float32).ravel()
        model = Model(self.graph, check_finite=False)
        expected = sum(a.size for a in model.parameter_arrays())
        if self.weights.size != expected:
            raise GraphError(
                f"checkpoint holds {self.weights.size} weights, graph needs {expected}"
            )

    def build_model(self, dtype=np.float32) -> Model:
        model = Model(self.graph, dtype=dtype)
        model.set_weights(self.weights)
        return model


# --- losses -----------------------------------------------------------------


def _loss_and_grad(pred: np.ndarray, target: np.ndarray, kind: str):
    diff = pred - target
    n = diff.size
    if kind == "mse":
        return float(np.mean(diff**2)), (2.0 / n) * diff
    return float(np.mean(np.abs(diff))), np.sign(diff) / n


# --- optimizers --------------------------------------------------------------


class _Adam:
    def __init__(self, arrays, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.arrays = arrays
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, grads) -> None:
        self.t += 1
        for a, g, m, v in zip(self.arrays, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g**2
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            a -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(a.dtype)


class _SgdMomentum:
    def __init__(self, arrays, lr, momentum=0.9):
        self.arrays = arrays
        self.lr, self.momentum = lr, momentum
        self.velocity = [np.zeros_like(a) for a in arrays]

    def step(self, grads) -> None:
        for a, g, v in zip(self.arrays, grads, self.velocity):
            v *= self.momentum
            v += g
            a -= (self.lr * v).astype(a.dtype)


def _make_optimizer(cfg: TrainConfig, arrays):
    if cfg.optimizer == "adam":
        return _Adam(arrays, cfg.lr)
    return _SgdMomentum(arrays, cfg.lr)


# --- data plumbing -------------------------------------------------------------


def _dataset_tensors(ds: TilePairDataset, dtype) -> tuple[np.ndarray, np.ndarray]:
    src = np.stack([p.source for p in ds.pairs]).astype(dtype) / 255.0
    exp = np.stack([p.expected for p in ds.pairs]).astype(dtype) / 255.0
    # HWC -> CHW
    return src.transpose(0, 3, 1, 2), exp.transpose(0, 3, 1, 2)


def _check_compat(graph: ModelGraph, ds: TilePairDataset) -> None:
    if ds.channels != graph.in_channels:
        raise GraphError(
            f"dataset has {ds.channels} channels, graph expects {graph.in_channels}"
        )
    stages = graph.pool_stages()
    if ds.tile_size % (2**stages) != 0:
        raise GraphError(
            f"tile size {ds.tile_size} is not divisible by 2^{stages} "
            f"as the pooling ladder requires"
        )


def _grad_list(model: Model, grads: dict) -> list[np.ndarray]:
    out = []
    for idx in sorted(model.params):
        out.extend(grads[idx])
    return out


# --- training -----------------------------------------------------------------


def train(
    graph: ModelGraph,
    ds: TilePairDataset,
    cfg: TrainConfig,
    x_override: np.ndarray | None = None,
    provenance_extra: dict | None = None,
):
    """Train a single-node graph; returns (Checkpoint, history).

    History rows are (iteration, epoch, loss), one per optimizer step; the
    iteration counter counts pair presentations, so the last row reads
    ``len(ds) * epochs``. Deterministic for a fixed config seed.

    ``x_override`` substitutes the source tensor (used for cascade stages fed
    by a previous node's outputs) and must align with the dataset pair order.
    """
    if graph.is_cascade:
        raise GraphError("train() handles one node; use train_thetanet for cascades")
    _check_compat(graph, ds)
    dtype = cfg.dtype
    x, y = _dataset_tensors(ds, dtype)
    if x_override is not None:
        if x_override.shape != x.shape:
            raise GraphError(f"override shape {x_override.shape} != data {x.shape}")
        x = np.ascontiguousarray(x_override, dtype=dtype)

    model = Model(graph, seed=cfg.seed, dtype=dtype)
    arrays = model.parameter_arrays()
    opt = _make_optimizer(cfg, arrays)
    rng = np.random.default_rng(cfg.seed + 1)

    n = x.shape[0]
    history: list[tuple[int, int, float]] = []
    iteration = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            pred = model.forward(x[batch], record=True)
            loss, dloss = _loss_and_grad(pred, y[batch], cfg.loss)
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"loss became {loss} at iteration {iteration} (epoch {epoch}); "
                    f"reduce the learning rate"
                )
            grads = model.backward(dloss)
            opt.step(_grad_list(model, grads))
            iteration += len(batch)
            history.append((iteration, epoch, loss))

    provenance = {
        "dataset_hash": ds.content_hash(),
        "config": {
            "epochs": cfg.epochs, "lr": cfg.lr, "optimizer": cfg.optimizer,
            "loss": cfg.loss, "batch_size": cfg.batch_size, "seed": cfg.seed,
            "float64": cfg.float64,
        },
        "iterations": iteration,
        "final_loss": history[-1][2],
    }
    if provenance_extra:
        provenance.update(provenance_extra)
    ckpt = Checkpoint(graph=graph, weights=model.get_weights(), provenance=provenance)
    return ckpt, history


def _node_outputs(ckpt: Checkpoint, x: np.ndarray, batch: int = 16) -> np.ndarray:
    model = ckpt.build_model(dtype=x.dtype)
    outs = [model.forward(x[i : i + batch]) for i in range(0, x.shape[0], batch)]
    return np.concatenate(outs, axis=0)


def train_thetanet(
    cascade: ModelGraph,
    dic_ds: TilePairDataset,
    pcm_ds: TilePairDataset,
    cfg: TrainConfig,
):
    """Stage-wise cascade training over two modality pipelines.

    Nodes 1 and 2 are trained per modality, each stage consuming the previous
    stage's outputs; node 3 is one shared model trained on the union of both
    modalities' node-2 outputs. Returns ``{"dic": Checkpoint, "pcm":
    Checkpoint, "history": {...}}`` where the per-modality checkpoints share
    node-3 weights bit for bit.
    """
    if not cascade.is_cascade or len(cascade.nodes) != 3:
        raise GraphError("train_thetanet needs a three-node cascade graph")
    if dic_ds.tile_size != pcm_ds.tile_size:
        raise GraphError("both datasets must share a tile size")
    dtype = cfg.dtype
    histories: dict[str, list] = {}
    stage: dict[str, np.ndarray] = {}
    checkpoints: dict[str, list[Checkpoint]] = {"dic": [], "pcm": []}
    data = {"dic": dic_ds, "pcm": pcm_ds}

    for m_index, modality in enumerate(("dic", "pcm")):
        ds = data[modality]
        x, _ = _dataset_tensors(ds, dtype)
        for node_index in (0, 1):
            node_cfg = TrainConfig(
                epochs=cfg.epochs, lr=cfg.lr, optimizer=cfg.optimizer, loss=cfg.loss,
                batch_size=cfg.batch_size, float64=cfg.float64,
                seed=cfg.seed + 1000 * m_index + 10 * node_index,
            )
            ckpt, hist = train(
                cascade.nodes[node_index], ds, node_cfg,
                x_override=None if node_index == 0 else stage[modality],
                provenance_extra={"cascade_node": node_index + 1, "modality": modality},
            )
            checkpoints[modality].append(ckpt)
            histories[f"{modality}_node{node_index + 1}"] = hist
            prev = x if node_index == 0 else stage[modality]
            stage[modality] = np.clip(_node_outputs(ckpt, prev), 0.0, 1.0)

    # node 3: one model over the union of both pipelines' stage-2 outputs
    union_pairs = tuple(dic_ds.pairs) + tuple(pcm_ds.pairs)
    union = TilePairDataset(
        pairs=union_pairs,
        tile_size=dic_ds.tile_size,
        provenance={"union_of": [dic_ds.provenance, pcm_ds.provenance]},
    )
    union_x = np.concatenate([stage["dic"], stage["pcm"]], axis=0)
    node3_cfg = TrainConfig(
        epochs=cfg.epochs, lr=cfg.lr, optimizer=cfg.optimizer, loss=cfg.loss,
        batch_size=cfg.batch_size, float64=cfg.float64, seed=cfg.seed + 9000,
    )
    ckpt3, hist3 = train(cascade.nodes[2], union, node3_cfg, x_override=union_x,
                         provenance_extra={"cascade_node": 3, "modality": "shared"})
    histories["shared_node3"] = hist3

    result = {}
    for modality in ("dic", "pcm"):
        node_ckpts = checkpoints[modality] + [ckpt3]
        weights = np.concatenate([c.weights for c in node_ckpts])
        result[modality] = Checkpoint(
            graph=cascade,
            weights=weights,
            provenance={
                "modality": modality,
                "nodes": [c.provenance for c in node_ckpts],
                "shared_final": cascade.shared_final,
            },
        )
    result["history"] = histories
    return result


def evaluate_loss(ckpt: Checkpoint, ds: TilePairDataset, kind: str = "mse",
                  batch: int = 16) -> float:
    """Dataset-mean loss of a checkpointed model (cascades run end to end)."""
    x, y = _dataset_tensors(ds, np.float32)
    pred = _node_outputs(ckpt, x, batch=batch)
    return _loss_and_grad(np.clip(pred, 0.0, 1.0), y, kind)[0]


# --- inference -----------------------------------------------------------------


def infer(ckpt: Checkpoint, image: ImageField, tile: int, stride: int | None = None,
          batch: int = 16, normalize: bool = True) -> ImageField:
    """Tiled inference: crop, per-tile forward, stitch, clamp to [0, 1].

    With ``normalize`` the whole input is min-max scaled to the unit range,
    mirroring how training scenes were scaled before tiling; pass
    ``normalize=False`` for data already in the model's [0, 1] domain.
    Uncovered margins (when the tile grid does not reach the border) pass the
    normalized input through.
    """
    arr = np.asarray(image.intensity, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    if tile > min(arr.shape):
        raise ValueError(f"tile {tile} exceeds image {arr.shape}")
    if normalize:
        lo, hi = float(arr.min()), float(arr.max())
        norm = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
    else:
        norm = np.clip(arr, 0.0, 1.0)

    tiles, origins = crop_tiles(norm, tile, stride)
    x = np.stack(tiles)[:, None, :, :].astype(np.float32)
    model = ckpt.build_model()
    outs = []
    for i in range(0, x.shape[0], batch):
        outs.append(model.forward(x[i : i + batch]))
    pred = np.clip(np.concatenate(outs, axis=0)[:, 0], 0.0, 1.0)

    stitched = stitch_tiles(list(pred), origins, norm.shape, conflict_atol=math.inf)
    covered = np.zeros(norm.shape, dtype=bool)
    for r, c in origins:
        covered[r : r + tile, c : c + tile] = True
    out = np.where(covered, stitched, norm)
    meta = dict(image.meta)
    meta["model"] = ckpt.graph.name
    return ImageField(out, image.pitch, meta=meta)


# --- persistence ------------------------------------------------------------------


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    header = {"graph": ckpt.graph.to_dict(), "provenance": ckpt.provenance}
    blob = json.dumps(header, sort_keys=True, default=str).encode()
    payload = ckpt.weights.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}")
    (hlen,) = struct.unpack_from("<I", data, 6)
    try:
        header = json.loads(data[10 : 10 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable header: {exc}") from exc
    payload = data[10 + hlen : -4]
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(payload) != crc:
        raise CheckpointFormatError("weight payload CRC mismatch")
    weights = np.frombuffer(payload, dtype="<f4").copy()
    return Checkpoint(graph=ModelGraph.from_dict(header["graph"]), weights=weights,
                      provenance=header["provenance"])


def checkpoint_hash(ckpt: Checkpoint) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(ckpt.graph.to_dict(), sort_keys=True).encode())
    h.update(ckpt.weights.tobytes())
    return h.hexdigest()


def save_history_csv(history, path) -> None:
    lines = ["iteration,epoch,loss"]
    lines += [f"{it},{ep},{loss:.8g}" for it, ep, loss in history]
    Path(path).write_text("\n".join(lines) + "\n")
