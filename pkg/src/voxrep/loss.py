"""Temperature-scaled contrastive objective over N positive projection pairs,
plus a brute-force reference evaluation used to cross-check it.

For pair i with views z_i1, z_i2, each of the two per-view terms is
-log( exp(<z_i1, z_i2>/t) / (exp(<z_i1, z_i2>/t) + sum over the other
2N - 2 sampled voxels of exp(<z_ik, z_jl>/t)) ). The implementation runs
on the autodiff engine with max-subtracted log-sum-exp; masked similarity
entries are pushed to a large negative constant so they contribute exactly
zero weight and zero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, concat, logsumexp, reshape, transpose2d, tsum
from .errors import ConfigError, ContractError
from .functional import matmul

_MASK_OFFSET = -1e9


@dataclass
class ProjectionBatch:
    """N positive pairs of unit-norm rows and the softmax temperature."""

    z1: Tensor
    z2: Tensor
    temperature: float = 0.1

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.z1.data.shape != self.z2.data.shape or self.z1.data.ndim != 2:
            raise ContractError("z1 and z2 must both be [N, d]")
        if self.z1.data.shape[0] < 1:
            raise ContractError("need at least one pair")
        for z in (self.z1, self.z2):
            norms = np.linalg.norm(z.data, axis=1)
            if np.abs(norms - 1.0).max() > 1e-4:
                raise ContractError("projection rows must be unit norm")

    @property
    def num_pairs(self) -> int:
        return self.z1.data.shape[0]


def info_nce(batch: ProjectionBatch) -> Tensor:
    """Differentiable loss summed over all 2N per-view terms."""
    n = batch.num_pairs
    inv_t = 1.0 / batch.temperature
    z = concat([batch.z1, batch.z2], axis=0)  # rows: (i, view1) then (i, view2)
    sims = matmul(z, transpose2d(z)) * inv_t

    # positive logit of pair i, shared by both of its rows
    pos = tsum(batch.z1 * batch.z2, axis=1) * inv_t

    # exclude self-similarities and the same-pair columns from the negatives
    pair_id = np.arange(2 * n) % n
    mask = np.zeros((2 * n, 2 * n), dtype=z.data.dtype)
    mask[pair_id[:, None] == pair_id[None, :]] = _MASK_OFFSET
    masked = sims + Tensor(mask)

    pos_col = reshape(concat([pos, pos], axis=0), (2 * n, 1))
    logits = concat([masked, pos_col], axis=1)  # [2N, 2N + 1]
    denom = logsumexp(logits, axis=1)
    return tsum(denom) - 2.0 * tsum(pos)


def info_nce_oracle(z1: np.ndarray, z2: np.ndarray, temperature: float) -> float:
    """Literal double-precision evaluation with explicit loops; no log-sum-exp
    trick, no masking arithmetic. Test scale only (N <= 256)."""
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    n = z1.shape[0]
    if n > 256:
        raise ContractError("oracle is for test scales (N <= 256)")
    views = (z1, z2)
    total = 0.0
    for i in range(n):
        numerator = np.exp(np.dot(z1[i], z2[i]) / temperature)
        for k in (0, 1):
            denominator = numerator
            for j in range(n):
                if j == i:
                    continue
                for l in (0, 1):
                    denominator += np.exp(np.dot(views[k][i], views[l][j]) / temperature)
            total += -np.log(numerator / denominator)
    return float(total)
