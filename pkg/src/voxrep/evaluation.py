"""Full-volume inference by overlapping tiles, Dice scoring and k-fold
cross-validation reports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model as M
from .augment import evaluation_window
from .autograd import Tensor
from .errors import ContractError, TrainingError
from .sampler import PatchSpec
from .train import Checkpoint, fpn_config_from_metadata, head_forward, tensors_to_params
from .volume import read_labels, read_volume, resample_labels, resample_volume


def tile_starts(extent: int, patch: int) -> list[int]:
    """Tile origins with 50% overlap, final tile clamped inside the volume."""
    if extent <= patch:
        return [0]
    stride = max(1, patch // 2)
    starts = list(range(0, extent - patch + 1, stride))
    if starts[-1] != extent - patch:
        starts.append(extent - patch)
    return starts


def sliding_window_predict(logits_fn, volume01: np.ndarray, patch_extents,
                           num_classes: int, pad_value: float = 0.0,
                           tile_batch: int = 8) -> np.ndarray:
    """Uniform-average overlapping tile logits, then argmax per voxel.

    ``logits_fn`` maps [B, 1, H, W, D] arrays to [B, K, H, W, D] logits.
    Volumes smaller than a patch are padded with ``pad_value`` (the windowed
    air intensity) and the prediction is cropped back.
    """
    patch = tuple(int(p) for p in patch_extents)
    original = volume01.shape
    pads = [(0, max(0, p - e)) for e, p in zip(original, patch)]
    padded = np.pad(volume01, pads, constant_values=np.float32(pad_value)) \
        if any(hi for _, hi in pads) else volume01
    extents = padded.shape

    logit_sum = np.zeros((num_classes,) + extents, np.float32)
    cover = np.zeros(extents, np.float32)
    origins = [(x, y, z)
               for x in tile_starts(extents[0], patch[0])
               for y in tile_starts(extents[1], patch[1])
               for z in tile_starts(extents[2], patch[2])]
    for i in range(0, len(origins), tile_batch):
        group = origins[i:i + tile_batch]
        tiles = np.stack([padded[x:x + patch[0], y:y + patch[1], z:z + patch[2]][None]
                          for x, y, z in group])
        logits = logits_fn(tiles.astype(np.float32))
        for (x, y, z), tile_logits in zip(group, logits):
            logit_sum[:, x:x + patch[0], y:y + patch[1], z:z + patch[2]] += tile_logits
            cover[x:x + patch[0], y:y + patch[1], z:z + patch[2]] += 1.0
    prediction = np.argmax(logit_sum / cover[None], axis=0).astype(np.uint16)
    return prediction[:original[0], :original[1], :original[2]]


def load_model_fn(ckpt: Checkpoint):
    """Rebuild a frozen forward pass from a checkpoint that holds backbone
    plus head tensors; returns (logits_fn, num_classes, eval_window)."""
    fpn = fpn_config_from_metadata(ckpt.metadata)
    head_meta = ckpt.metadata["head"]
    mode = head_meta["mode"]
    backbone = tensors_to_params(
        {k: v for k, v in ckpt.tensors.items() if k.startswith(("encoder.", "decoder."))},
        requires_grad=False)
    head = tensors_to_params(
        {k: v for k, v in ckpt.tensors.items() if k.startswith(("linear_head.", "nonlinear_head."))},
        requires_grad=False)

    def logits_fn(batch: np.ndarray) -> np.ndarray:
        pyramid = M.fpn_forward(backbone, fpn, Tensor(batch))
        return head_forward(mode, head, pyramid, fpn).data

    return logits_fn, int(head_meta["num_classes"]), tuple(head_meta["eval_window"])


def predict_record(ckpt: Checkpoint, record: dict, patch: PatchSpec,
                   target_spacing=(1.0, 1.0, 2.0)):
    """Preprocess one manifest record, run tiled inference, and return
    (prediction, ground truth) on the resampled grid."""
    logits_fn, num_classes, window = load_model_fn(ckpt)
    volume = resample_volume(read_volume(record["volume_path"]), target_spacing)
    windowed = evaluation_window(volume.hu, window)
    air01 = float(np.clip((-1000.0 - window[0]) / (window[1] - window[0]), 0.0, 1.0))
    prediction = sliding_window_predict(logits_fn, windowed, patch.extents,
                                        num_classes, pad_value=air01)
    labels = read_labels(record["labels_path"])
    source_spacing = read_volume(record["volume_path"]).spacing
    gt = resample_labels(labels, source_spacing, target_spacing)
    return prediction, gt


def dice_score(pred: np.ndarray, gt: np.ndarray, class_id: int) -> float:
    """2|A and B| / (|A| + |B|); defined as 1.0 when both sets are empty."""
    if pred.shape != gt.shape:
        raise ContractError(f"extent mismatch {pred.shape} vs {gt.shape}")
    a = pred == class_id
    b = gt == class_id
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def fold_split(num_items: int, k: int, seed: int) -> list[list[int]]:
    """Deterministic partition into k folds with sizes differing by <= 1."""
    if k < 1 or k > num_items:
        raise ContractError(f"cannot split {num_items} items into {k} folds")
    order = np.random.Generator(np.random.PCG64(seed)).permutation(num_items)
    return [sorted(int(i) for i in order[f::k]) for f in range(k)]


@dataclass
class DiceReport:
    fold_scores: list[dict[int, float]]
    class_mean: dict[int, float]
    class_std: dict[int, float]
    macro_mean: float

    @classmethod
    def aggregate(cls, fold_scores: list[dict[int, float]]) -> "DiceReport":
        classes = sorted(fold_scores[0]) if fold_scores else []
        mean = {c: float(np.mean([f[c] for f in fold_scores])) for c in classes}
        std = {c: float(np.std([f[c] for f in fold_scores])) for c in classes}
        macro = float(np.mean(list(mean.values()))) if classes else float("nan")
        return cls(fold_scores=fold_scores, class_mean=mean, class_std=std, macro_mean=macro)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["fold", "class", "dice"])
            for fold, scores in enumerate(self.fold_scores):
                for class_id in sorted(scores):
                    writer.writerow([fold, class_id, f"{scores[class_id]:.6f}"])

    def write_json(self, path) -> None:
        payload = {
            "classes": {str(c): {"mean": self.class_mean[c], "std": self.class_std[c]}
                        for c in sorted(self.class_mean)},
            "macro_mean": self.macro_mean,
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def evaluate_records(ckpt: Checkpoint, records, patch: PatchSpec, num_classes: int,
                     target_spacing=(1.0, 1.0, 2.0)) -> dict[int, float]:
    """Mean per-class Dice of a model checkpoint over manifest records
    (foreground classes only)."""
    sums = {c: [] for c in range(1, num_classes)}
    for record in records:
        pred, gt = predict_record(ckpt, record, patch, target_spacing)
        for c in range(1, num_classes):
            sums[c].append(dice_score(pred, gt, c))
    return {c: float(np.mean(v)) for c, v in sums.items()}


def cross_validate(records, k: int, train_fn, seed: int, patch: PatchSpec,
                   num_classes: int, target_spacing=(1.0, 1.0, 2.0)) -> DiceReport:
    """k-fold cross-validation: train_fn(train_records, fold_index) returns a
    model checkpoint, evaluated on the held-out fold."""
    records = list(records)
    folds = fold_split(len(records), k, seed)
    fold_scores = []
    for fold_index, held_out in enumerate(folds):
        train_records = [records[i] for i in range(len(records))
                         if i not in set(held_out)]
        try:
            ckpt = train_fn(train_records, fold_index)
        except Exception as exc:
            raise TrainingError(f"training failed on fold {fold_index}: {exc}") from exc
        fold_scores.append(evaluate_records(ckpt, [records[i] for i in held_out],
                                            patch, num_classes, target_spacing))
    return DiceReport.aggregate(fold_scores)
