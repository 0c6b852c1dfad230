"""Training loops: contrastive pre-training, head probing on frozen
representations, and fine-tuning with a freeze-then-ramp backbone schedule.

Batches are a pure function of (seed, step), so determinism and checkpoint
resume need no mutable RNG state: the checkpoint records the seed and step
and the continuation regenerates exactly the batches the uninterrupted run
would have seen. Checkpoints serialize named float32 tensors plus JSON
metadata (format VXCKPT1); metrics go to JSONL, one line per step.
"""

from __future__ import annotations

import json
import queue
import struct
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from .augment import AugmentConfig, evaluation_window
from .autograd import Tape, Tensor, backward, logsumexp, mean as tmean, mul, tsum
from .errors import ConfigError, DataError, FormatError, TrainingError
from .loss import ProjectionBatch, info_nce
from .model import FpnConfig
from .optim import AdamState, adam_step, collect_grads, zero_grads
from .phantom import read_manifest
from .sampler import Batch, PatchSpec, SamplerConfig, assemble_batch
from .volume import Volume, compute_body_mask, pad_to_shape, read_labels, read_volume

CHECKPOINT_MAGIC = b"VXCKPT1\x00"
CHECKPOINT_VERSION = 1

# seed-derivation tags, one per independent random stream
_TAG_INIT = 0
_TAG_BATCH = 1
_TAG_VAL = 2
_TAG_PROBE = 3
_TAG_HEAD = 4


def derive_seed(master: int, *parts: int) -> int:
    words = np.random.SeedSequence((int(master),) + tuple(int(p) for p in parts))
    state = words.generate_state(2, np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    version: int
    step: int
    metadata: dict
    tensors: dict[str, np.ndarray]


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    meta = json.dumps(ckpt.metadata, sort_keys=True).encode("utf-8")
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<I", ckpt.version)
    buf += struct.pack("<Q", ckpt.step)
    buf += struct.pack("<I", len(meta))
    buf += meta
    names = sorted(ckpt.tensors)
    buf += struct.pack("<I", len(names))
    for name in names:
        encoded = name.encode("utf-8")
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        buf += struct.pack("<H", len(encoded))
        buf += encoded
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic in {path}", offset=0)

    offset = 8

    def take(n, what):
        nonlocal offset
        if offset + n > len(raw):
            raise FormatError(f"truncated while reading {what} in {path}", offset=offset)
        piece = raw[offset:offset + n]
        offset += n
        return piece

    version = struct.unpack("<I", take(4, "version"))[0]
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} in {path}", offset=8)
    step = struct.unpack("<Q", take(8, "step"))[0]
    meta_len = struct.unpack("<I", take(4, "metadata length"))[0]
    metadata = json.loads(take(meta_len, "metadata").decode("utf-8"))
    count = struct.unpack("<I", take(4, "tensor count"))[0]
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = struct.unpack("<H", take(2, "name length"))[0]
        name = take(name_len, "name").decode("utf-8")
        if name in tensors:
            raise FormatError(f"name collision for {name!r} in {path}", offset=offset)
        ndim = struct.unpack("<B", take(1, "ndim"))[0]
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "extents")) if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        payload = take(4 * size, f"payload of {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if offset != len(raw):
        raise FormatError(f"{len(raw) - offset} trailing bytes in {path}", offset=offset)
    return Checkpoint(version=version, step=step, metadata=metadata, tensors=tensors)


def params_to_tensors(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: p.data.astype(np.float32, copy=True) for name, p in params.items()}


def tensors_to_params(tensors: dict[str, np.ndarray], requires_grad=True) -> dict[str, Tensor]:
    return {name: Tensor(arr.copy(), requires_grad=requires_grad)
            for name, arr in tensors.items()}


def _pack_adam(state: AdamState) -> dict[str, np.ndarray]:
    packed = {}
    for name, m in state.m.items():
        packed[f"adam.m.{name}"] = m
        packed[f"adam.v.{name}"] = state.v[name]
    return packed


def _unpack_adam(tensors: dict[str, np.ndarray], meta: dict) -> AdamState:
    state = AdamState(lr=meta["lr"], step_count=meta["step_count"])
    for name, arr in tensors.items():
        if name.startswith("adam.m."):
            state.m[name[len("adam.m."):]] = arr.copy()
        elif name.startswith("adam.v."):
            state.v[name[len("adam.v."):]] = arr.copy()
    return state


# ---------------------------------------------------------------------------
# configs


@dataclass
class PretrainConfig:
    total_batches: int = 2000
    volumes_per_batch: int = 4
    learning_rate: float = 0.0003
    temperature: float = 0.1
    seed: int = 0
    patch: PatchSpec = field(default_factory=PatchSpec)
    fpn: FpnConfig = field(default_factory=FpnConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    val_volumes: int = 4
    val_batches: int = 2
    val_interval: int = 10
    checkpoint_interval: int = 500
    workers: int = 0

    def __post_init__(self):
        if self.total_batches < 0 or self.volumes_per_batch < 1:
            raise ConfigError("total_batches must be >= 0 and volumes_per_batch >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        self.patch.validate_for_levels(self.fpn.levels)


@dataclass
class ProbeConfig:
    mode: str = "linear"
    total_batches: int = 1000
    batch_size: int = 4
    learning_rate: float = 0.0003
    num_classes: int = 4
    eval_window: tuple[float, float] = (-1350.0, 1000.0)
    seed: int = 0
    patch: PatchSpec = field(default_factory=PatchSpec)

    def __post_init__(self):
        if self.mode not in ("linear", "nonlinear"):
            raise ConfigError(f"probe mode must be linear or nonlinear, got {self.mode!r}")
        if self.total_batches < 0 or self.batch_size < 1 or self.num_classes < 2:
            raise ConfigError("bad probe counts")


@dataclass
class FinetuneSchedule:
    freeze_batches: int = 15000
    ramp_batches: int = 1200
    backbone_lr_start: float = 0.00003
    backbone_lr_end: float = 0.0003
    head_lr: float = 0.0003

    def __post_init__(self):
        if self.ramp_batches < 1:
            raise ConfigError("ramp_batches must be >= 1")
        if not 0 < self.backbone_lr_start < self.backbone_lr_end:
            raise ConfigError("need 0 < backbone_lr_start < backbone_lr_end")


def backbone_lr(t: int, schedule: FinetuneSchedule) -> float:
    """Backbone learning rate at batch index t: zero while frozen, then a
    geometric ramp from start to end over ramp_batches, then constant."""
    if t < schedule.freeze_batches:
        return 0.0
    delta = t - schedule.freeze_batches
    if delta <= 0:
        return schedule.backbone_lr_start
    if delta >= schedule.ramp_batches:
        return schedule.backbone_lr_end
    ratio = schedule.backbone_lr_end / schedule.backbone_lr_start
    return schedule.backbone_lr_start * ratio ** (delta / schedule.ramp_batches)


# ---------------------------------------------------------------------------
# data access


class VolumeStore:
    """Volumes, masks and labels from a manifest, padded to patch size and
    cached in memory (desk scale)."""

    def __init__(self, records, patch: PatchSpec, with_labels=False,
                 eval_window=None):
        self.records = list(records)
        self.items = []
        self.labels = []
        self.body_indices = []
        for record in self.records:
            volume = read_volume(record["volume_path"])
            volume, offsets = pad_to_shape(volume, patch.extents)
            mask = compute_body_mask(volume)
            if eval_window is not None:
                volume = Volume(evaluation_window(volume.hu, eval_window), volume.spacing)
            self.items.append((volume, mask))
            if with_labels:
                labels = read_labels(record["labels_path"])
                pads = [(offsets[a], volume.shape[a] - labels.shape[a] - offsets[a])
                        for a in range(3)]
                self.labels.append(np.pad(labels, pads))
                self.body_indices.append(np.argwhere(mask))

    def __len__(self):
        return len(self.items)


# ---------------------------------------------------------------------------
# pre-training


@dataclass
class TrainState:
    step: int
    params: dict[str, Tensor]
    optimizer: AdamState


def init_pretrain_params(config: PretrainConfig) -> dict[str, Tensor]:
    rng = np.random.Generator(np.random.PCG64(derive_seed(config.seed, _TAG_INIT)))
    params = M.init_backbone_params(config.fpn, rng)
    params.update(M.init_projector_params(config.fpn, rng))
    return params


def make_pretrain_batch(store: VolumeStore, config: PretrainConfig, step: int) -> Batch:
    rng = np.random.Generator(np.random.PCG64(derive_seed(config.seed, _TAG_BATCH, step)))
    n = min(config.volumes_per_batch, len(store))
    picks = rng.choice(len(store), size=n, replace=len(store) < config.volumes_per_batch)
    items = [store.items[i] for i in picks]
    seeds = [int(rng.integers(0, 2 ** 62)) for _ in picks]
    return assemble_batch(items, config.patch, config.sampler, config.augment, seeds)


def _batch_loss(params: dict[str, Tensor], config: PretrainConfig, batch: Batch) -> Tensor:
    patches = Tensor(batch.patches)
    pyramid = M.fpn_forward(params, config.fpn, patches)
    h1 = M.gather_representations(pyramid, config.fpn, batch.patch_index_1, batch.local_1)
    h2 = M.gather_representations(pyramid, config.fpn, batch.patch_index_2, batch.local_2)
    z1 = M.project(params, h1)
    z2 = M.project(params, h2)
    return info_nce(ProjectionBatch(z1, z2, temperature=config.temperature))


def pretrain_step(state: TrainState, batch: Batch, config: PretrainConfig):
    """One optimization step; returns (state, loss value)."""
    zero_grads(state.params)
    with Tape() as tape:
        loss = _batch_loss(state.params, config, batch)
    value = loss.item()
    backward(loss, tape)
    if not np.isfinite(value):
        norms = {name: float(np.linalg.norm(np.asarray(g)))
                 for name, g in collect_grads(state.params).items()}
        worst = sorted(norms.items(), key=lambda kv: -kv[1])[:5]
        raise TrainingError(f"non-finite loss {value} at step {state.step}; "
                            f"largest grad norms: {worst}")
    adam_step(state.params, collect_grads(state.params), state.optimizer)
    state.step += 1
    return state, value


class _BatchFeeder:
    """Background sampler threads delivering batches in step order through
    bounded queues. Batch content depends only on (seed, step), so worker
    timing cannot change results."""

    def __init__(self, make_batch, first_step: int, last_step: int, workers: int):
        self.make_batch = make_batch
        self.workers = max(1, workers)
        self.queues = [queue.Queue(maxsize=2) for _ in range(self.workers)]
        self.first = first_step
        self.last = last_step
        self.threads = []
        for w in range(self.workers):
            t = threading.Thread(target=self._run, args=(w,), daemon=True)
            t.start()
            self.threads.append(t)

    def _run(self, w: int):
        for step in range(self.first + w, self.last, self.workers):
            try:
                self.queues[w].put(self.make_batch(step))
            except Exception as exc:  # surfaced to the consumer in step order
                self.queues[w].put(exc)
                return

    def __iter__(self):
        for step in range(self.first, self.last):
            item = self.queues[(step - self.first) % self.workers].get()
            if isinstance(item, Exception):
                raise item
            yield step, item


def pretrain_metadata(config: PretrainConfig, extra=None) -> dict:
    meta = {
        "config": {
            "total_batches": config.total_batches,
            "volumes_per_batch": config.volumes_per_batch,
            "learning_rate": config.learning_rate,
            "temperature": config.temperature,
            "seed": config.seed,
            "patch": list(config.patch.extents),
            "fpn": asdict(config.fpn),
            "augment": asdict(config.augment),
            "sampler": asdict(config.sampler),
        },
        "rng_state": {"scheme": "stateless-per-step", "seed": config.seed},
        "representation_dim": M.representation_dim(config.fpn),
    }
    if extra:
        meta.update(extra)
    return meta


def fpn_config_from_metadata(meta: dict) -> FpnConfig:
    fpn = dict(meta["config"]["fpn"])
    fpn["representation_levels"] = tuple(fpn["representation_levels"])
    return FpnConfig(**fpn)


def _write_metric(handle, record: dict) -> None:
    handle.write(json.dumps(record) + "\n")
    handle.flush()


def _checkpoint_from_state(state: TrainState, config: PretrainConfig) -> Checkpoint:
    tensors = params_to_tensors(state.params)
    tensors.update(_pack_adam(state.optimizer))
    meta = pretrain_metadata(config, {"adam": {"lr": state.optimizer.lr,
                                       "step_count": state.optimizer.step_count}})
    return Checkpoint(version=CHECKPOINT_VERSION, step=state.step, metadata=meta,
                      tensors=tensors)


def pretrain(config: PretrainConfig, manifest_path, out_dir,
             resume_from=None) -> Checkpoint:
    """Run contrastive pre-training; writes metrics, interval checkpoints and
    ckpt_final.vxckpt into out_dir, and returns the final checkpoint."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = read_manifest(manifest_path)
    if not records:
        raise DataError(f"manifest {manifest_path} is empty")

    n_val = min(config.val_volumes, max(0, len(records) - 1))
    train_store = VolumeStore(records[:len(records) - n_val], config.patch)
    val_store = VolumeStore(records[len(records) - n_val:], config.patch) if n_val else None

    val_batches = []
    if val_store is not None:
        for i in range(config.val_batches):
            rng = np.random.Generator(np.random.PCG64(derive_seed(config.seed, _TAG_VAL, i)))
            n = min(config.volumes_per_batch, len(val_store))
            picks = rng.choice(len(val_store), size=n, replace=len(val_store) < config.volumes_per_batch)
            seeds = [int(rng.integers(0, 2 ** 62)) for _ in picks]
            val_batches.append(assemble_batch([val_store.items[i] for i in picks],
                                              config.patch, config.sampler,
                                              config.augment, seeds))

    def val_loss(params) -> float:
        losses = [_batch_loss(params, config, b).item() for b in val_batches]
        return float(np.mean(losses)) if losses else float("nan")

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        params = tensors_to_params(
            {k: v for k, v in ckpt.tensors.items() if not k.startswith("adam.")})
        optimizer = _unpack_adam(ckpt.tensors, ckpt.metadata["adam"])
        state = TrainState(step=ckpt.step, params=params, optimizer=optimizer)
    else:
        state = TrainState(step=0, params=init_pretrain_params(config),
                           optimizer=AdamState(lr=config.learning_rate))

    metrics_path = out_dir / "metrics.jsonl"
    mode = "a" if resume_from is not None else "w"
    with open(metrics_path, mode) as metrics:
        if state.step == 0 and val_batches:
            _write_metric(metrics, {"step": 0, "loss": None,
                                    "lr_backbone": config.learning_rate,
                                    "lr_head": config.learning_rate,
                                    "wall_ms": 0.0,
                                    "val_loss": val_loss(state.params)})
        feeder = _BatchFeeder(lambda s: make_pretrain_batch(train_store, config, s),
                              state.step, config.total_batches, config.workers)
        for step, batch in feeder:
            t0 = time.perf_counter()
            state, value = pretrain_step(state, batch, config)
            record = {"step": state.step, "loss": value,
                      "lr_backbone": config.learning_rate,
                      "lr_head": config.learning_rate,
                      "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3)}
            if val_batches and (state.step % config.val_interval == 0
                                or state.step == config.total_batches):
                record["val_loss"] = val_loss(state.params)
            _write_metric(metrics, record)
            if config.checkpoint_interval and state.step % config.checkpoint_interval == 0 \
                    and state.step < config.total_batches:
                save_checkpoint(out_dir / f"ckpt_{state.step:06d}.vxckpt",
                                _checkpoint_from_state(state, config))

    final = _checkpoint_from_state(state, config)
    save_checkpoint(out_dir / "ckpt_final.vxckpt", final)
    return final


# ---------------------------------------------------------------------------
# supervised heads: probing and fine-tuning


def cross_entropy(logits: Tensor, labels: np.ndarray, num_classes: int) -> Tensor:
    """Mean voxel-wise cross-entropy; labels [B, X, Y, Z] with background 0."""
    if labels.max(initial=0) >= num_classes:
        raise DataError(f"label id {labels.max()} >= num_classes {num_classes}")
    onehot = (labels[:, None] == np.arange(num_classes).reshape(1, -1, 1, 1, 1))
    onehot = onehot.astype(logits.data.dtype)
    lse = logsumexp(logits, axis=1)
    picked = tsum(mul(logits, Tensor(onehot)), axis=1)
    return tmean(lse - picked)


def make_probe_batch(store: VolumeStore, config: ProbeConfig, step: int):
    """batch_size windowed patches centered on uniformly drawn body voxels."""
    rng = np.random.Generator(np.random.PCG64(derive_seed(config.seed, _TAG_PROBE, step)))
    patch = np.asarray(config.patch.extents)
    xs, ys = [], []
    for _ in range(config.batch_size):
        vi = int(rng.integers(0, len(store)))
        volume, _ = store.items[vi]
        body = store.body_indices[vi]
        center = body[int(rng.integers(0, len(body)))]
        origin = np.clip(center - patch // 2, 0, np.asarray(volume.shape) - patch)
        sl = tuple(slice(int(o), int(o + p)) for o, p in zip(origin, patch))
        xs.append(volume.hu[sl][None])
        ys.append(store.labels[vi][sl])
    return np.stack(xs), np.stack(ys)


def _head_init(mode: str, fpn: FpnConfig, num_classes: int, seed: int) -> dict[str, Tensor]:
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, _TAG_HEAD)))
    if mode == "linear":
        return M.init_linear_head_params(fpn, num_classes, rng)
    return M.init_nonlinear_head_params(fpn, num_classes, rng)


def head_forward(mode: str, head: dict[str, Tensor], pyramid, fpn: FpnConfig) -> Tensor:
    if mode == "linear":
        return M.linear_head_forward(head, pyramid, fpn)
    return M.nonlinear_head_forward(head, pyramid, fpn)


def train_probe(backbone_ckpt: Checkpoint, config: ProbeConfig, labeled_manifest,
                out_dir, frozen: bool = True) -> Checkpoint:
    """Train a voxel-wise head on top of the (frozen) backbone; returns a
    self-contained checkpoint holding backbone plus head."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fpn = fpn_config_from_metadata(backbone_ckpt.metadata)
    config.patch.validate_for_levels(fpn.levels)
    backbone = tensors_to_params(
        {k: v for k, v in backbone_ckpt.tensors.items()
         if k.startswith(("encoder.", "decoder."))}, requires_grad=not frozen)
    head = _head_init(config.mode, fpn, config.num_classes, config.seed)
    optimizer = AdamState(lr=config.learning_rate)

    records = read_manifest(labeled_manifest)
    store = VolumeStore(records, config.patch, with_labels=True,
                        eval_window=config.eval_window)

    with open(out_dir / "metrics.jsonl", "w") as metrics:
        for step in range(config.total_batches):
            t0 = time.perf_counter()
            patches, labels = make_probe_batch(store, config, step)
            zero_grads(head)
            with Tape() as tape:
                pyramid = M.fpn_forward(backbone, fpn, Tensor(patches))
                logits = head_forward(config.mode, head, pyramid, fpn)
                loss = cross_entropy(logits, labels, config.num_classes)
            value = loss.item()
            backward(loss, tape)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite probe loss at step {step}")
            adam_step(head, collect_grads(head), optimizer)
            _write_metric(metrics, {"step": step + 1, "loss": value,
                                    "lr_backbone": 0.0, "lr_head": config.learning_rate,
                                    "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3)})

    tensors = params_to_tensors(backbone)
    tensors.update(params_to_tensors(head))
    meta = dict(backbone_ckpt.metadata)
    meta.update({"head": {"mode": config.mode, "num_classes": config.num_classes,
                          "frozen_backbone": frozen,
                          "eval_window": list(config.eval_window),
                          "seed": config.seed}})
    ckpt = Checkpoint(version=CHECKPOINT_VERSION, step=config.total_batches,
                      metadata=meta, tensors=tensors)
    save_checkpoint(out_dir / "ckpt_final.vxckpt", ckpt)
    return ckpt


def finetune(backbone_ckpt: Checkpoint, config: ProbeConfig, schedule: FinetuneSchedule,
             labeled_manifest, out_dir) -> Checkpoint:
    """Non-linear head plus backbone training under the freeze-then-ramp
    backbone schedule; the head learning rate stays constant."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fpn = fpn_config_from_metadata(backbone_ckpt.metadata)
    config.patch.validate_for_levels(fpn.levels)
    backbone = tensors_to_params(
        {k: v for k, v in backbone_ckpt.tensors.items()
         if k.startswith(("encoder.", "decoder."))}, requires_grad=False)
    head = _head_init("nonlinear", fpn, config.num_classes, config.seed)
    head_opt = AdamState(lr=schedule.head_lr)
    backbone_opt = AdamState(lr=0.0)

    records = read_manifest(labeled_manifest)
    store = VolumeStore(records, config.patch, with_labels=True,
                        eval_window=config.eval_window)

    with open(out_dir / "metrics.jsonl", "w") as metrics:
        for step in range(config.total_batches):
            t0 = time.perf_counter()
            lr_b = backbone_lr(step, schedule)
            train_backbone = lr_b > 0.0
            for p in backbone.values():
                p.requires_grad = train_backbone
            patches, labels = make_probe_batch(store, config, step)
            zero_grads(head)
            zero_grads(backbone)
            with Tape() as tape:
                pyramid = M.fpn_forward(backbone, fpn, Tensor(patches))
                logits = head_forward("nonlinear", head, pyramid, fpn)
                loss = cross_entropy(logits, labels, config.num_classes)
            value = loss.item()
            backward(loss, tape)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite finetune loss at step {step}")
            adam_step(head, collect_grads(head), head_opt)
            if train_backbone:
                backbone_opt.lr = lr_b
                adam_step(backbone, collect_grads(backbone), backbone_opt)
            _write_metric(metrics, {"step": step + 1, "loss": value,
                                    "lr_backbone": lr_b, "lr_head": schedule.head_lr,
                                    "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3)})

    tensors = params_to_tensors(backbone)
    tensors.update(params_to_tensors(head))
    meta = dict(backbone_ckpt.metadata)
    meta.update({"head": {"mode": "nonlinear", "num_classes": config.num_classes,
                          "frozen_backbone": False,
                          "eval_window": list(config.eval_window),
                          "seed": config.seed},
                 "finetune_schedule": asdict(schedule)})
    ckpt = Checkpoint(version=CHECKPOINT_VERSION, step=config.total_batches,
                      metadata=meta, tensors=tensors)
    save_checkpoint(out_dir / "ckpt_final.vxckpt", ckpt)
    return ckpt
