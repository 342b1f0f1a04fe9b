"""Residual vector-quantization codebook maintained by exponential moving averages.

Codes are never trained by gradient; they are cluster centres pulled toward
the residuals assigned to them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class CodebookError(ValueError):
    pass


@dataclass
class Quantized:
    codes: np.ndarray          # (n, k) int
    code_vectors: np.ndarray   # (n, k, d)
    c_sum: np.ndarray          # (n, d)
    residual: np.ndarray       # (n, d) final residual r_{k+1}
    layer_inputs: np.ndarray   # (n, k, d) residual r_i entering each layer


class ResidualCodebook:
    def __init__(self, layers: np.ndarray, usage: np.ndarray | None = None):
        layers = np.array(layers, dtype=np.float64)
        if layers.ndim != 3 or layers.shape[0] < 1:
            raise CodebookError(f"codebook layers must be (k>=1, N_c, d), got {layers.shape}")
        if not np.isfinite(layers).all():
            raise CodebookError("codebook contains non-finite codes")
        self.layers = layers
        self.usage = np.zeros(layers.shape[:2]) if usage is None else np.array(usage, dtype=np.float64)
        if self.usage.shape != layers.shape[:2] or np.any(self.usage < 0):
            raise CodebookError("usage must be non-negative with shape (k, N_c)")

    @classmethod
    def zeros(cls, k: int, n_codes: int, dim: int):
        return cls(np.zeros((k, n_codes, dim)))

    @property
    def depth(self) -> int:
        return self.layers.shape[0]

    @property
    def n_codes(self) -> int:
        return self.layers.shape[1]

    @property
    def dim(self) -> int:
        return self.layers.shape[2]

    def copy(self) -> "ResidualCodebook":
        return ResidualCodebook(self.layers.copy(), self.usage.copy())

    def truncated(self, k: int) -> "ResidualCodebook":
        """View of the first ``k`` layers (k >= 1)."""
        return ResidualCodebook(self.layers[:k].copy(), self.usage[:k].copy())

    def quantize(self, z) -> Quantized:
        """Greedy residual nearest-code search; ties go to the lowest index.

        ``z`` may be a single vector (d,) or a batch (n, d).
        """
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        z2 = z[None] if single else z
        if z2.ndim != 2 or z2.shape[1] != self.dim:
            raise CodebookError(f"quantize: expected dim {self.dim}, got shape {z.shape}")
        if not np.isfinite(z2).all():
            raise CodebookError("quantize: non-finite latent")
        n, k = len(z2), self.depth
        codes = np.empty((n, k), dtype=np.int64)
        vecs = np.empty((n, k, self.dim))
        inputs = np.empty((n, k, self.dim))
        r = z2.copy()
        for i in range(k):
            inputs[:, i] = r
            dist = np.sum((r[:, None, :] - self.layers[i][None]) ** 2, axis=-1)
            idx = np.argmin(dist, axis=1)
            codes[:, i] = idx
            vecs[:, i] = self.layers[i][idx]
            r = r - vecs[:, i]
        c_sum = vecs.sum(axis=1)
        q = Quantized(codes, vecs, c_sum, r, inputs)
        if single:
            q = Quantized(codes[0], vecs[0], c_sum[0], r[0], inputs[0])
        return q

    def ema_update(self, layer: int, indices, residuals, decay: float) -> None:
        """Pull each assigned code toward the mean of its assigned residuals.

        ``code <- decay * code + (1 - decay) * mean(assigned)``; unassigned
        codes keep their value.  Usage counts decay for every code.  An empty
        assignment list leaves the codebook untouched; ``decay=1`` freezes it.
        """
        if not 0.0 <= decay <= 1.0:
            raise CodebookError(f"ema_update: decay must lie in [0, 1], got {decay}")
        indices = np.asarray(indices, dtype=np.int64).reshape(-1)
        residuals = np.asarray(residuals, dtype=np.float64).reshape(-1, self.dim)
        if len(indices) == 0:
            return
        if len(residuals) != len(indices):
            raise CodebookError(f"ema_update: {len(indices)} indices but {len(residuals)} residuals")
        counts = np.bincount(indices, minlength=self.n_codes).astype(np.float64)
        self.usage[layer] = decay * self.usage[layer] + (1.0 - decay) * counts
        sums = np.zeros((self.n_codes, self.dim))
        np.add.at(sums, indices, residuals)
        hit = counts > 0
        means = sums[hit] / counts[hit, None]
        self.layers[layer, hit] = decay * self.layers[layer, hit] + (1.0 - decay) * means

    def update_from_latents(self, z, decay: float) -> Quantized:
        """Quantize ``z`` (n, d) and EMA-update every layer with its residual inputs."""
        q = self.quantize(np.asarray(z).reshape(-1, self.dim))
        for i in range(self.depth):
            self.ema_update(i, q.codes[:, i], q.layer_inputs[:, i], decay)
        return q

    def sample(self, rng: np.random.Generator, n: int | None = None):
        """Random code per layer, uniform and independent; returns (indices, summed vector)."""
        shape = (self.depth,) if n is None else (n, self.depth)
        idx = rng.integers(0, self.n_codes, size=shape)
        vec = self.layers[np.arange(self.depth), idx].sum(axis=-2)
        return idx, vec

    def utilization(self, floor: float) -> float:
        """Fraction of codes (over all layers) with usage above ``floor``."""
        return float(np.mean(self.usage > floor))

    def revive_dead_codes(self, pools, floor: float, rng: np.random.Generator) -> int:
        """Replace codes whose usage fell below ``floor`` with random pool vectors.

        ``pools[i]`` holds recent residual inputs of layer ``i``.  Revived codes
        get the layer's mean usage.  Returns the number of revived codes.
        """
        revived = 0
        for i in range(self.depth):
            dead = np.flatnonzero(self.usage[i] < floor)
            if len(dead) == 0:
                continue
            pool = np.asarray(pools[i], dtype=np.float64).reshape(-1, self.dim)
            if len(pool) == 0:
                raise CodebookError(f"revive_dead_codes: empty pool for layer {i} with dead codes")
            pick = rng.choice(len(pool), size=len(dead), replace=len(pool) < len(dead))
            self.layers[i, dead] = pool[pick]
            self.usage[i, dead] = self.usage[i].mean()
            revived += len(dead)
        return revived

    def seed_kmeanspp(self, z, rng: np.random.Generator) -> None:
        """k-means++ seeding, layer by layer on the residuals left by earlier layers."""
        r = np.asarray(z, dtype=np.float64).reshape(-1, self.dim).copy()
        for i in range(self.depth):
            centres = [r[rng.integers(len(r))]]
            d2 = np.sum((r - centres[0]) ** 2, axis=1)
            for _ in range(1, self.n_codes):
                total = d2.sum()
                j = rng.integers(len(r)) if total <= 0 else rng.choice(len(r), p=d2 / total)
                centres.append(r[j])
                d2 = np.minimum(d2, np.sum((r - r[j]) ** 2, axis=1))
            self.layers[i] = np.array(centres)
            dist = np.sum((r[:, None] - self.layers[i][None]) ** 2, axis=-1)
            r = r - self.layers[i][np.argmin(dist, axis=1)]

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"codebook.layer{i}": self.layers[i] for i in range(self.depth)}
        out["codebook.usage"] = self.usage
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ResidualCodebook":
        k = sum(1 for name in arrays if name.startswith("codebook.layer"))
        if k == 0:
            raise CodebookError("no codebook layers in file")
        return cls(np.stack([arrays[f"codebook.layer{i}"] for i in range(k)]), arrays["codebook.usage"])


def drift_metric(decode_live: Callable, decode_frozen: Callable, latents) -> float:
    """Mean L1 distance between live and frozen decodings of the same latents.

    ``latents`` is (n, 4, d); decoders map it to (n, 16, 197).
    """
    a = decode_live(latents)
    b = decode_frozen(latents)
    return float(np.abs(a - b).reshape(len(a), -1).sum(axis=1).mean())


def sample_latents(cb: ResidualCodebook, rng: np.random.Generator, n: int, slots: int) -> np.ndarray:
    """``n`` decoder inputs, each slot an independent random residual code: (n, slots, d)."""
    _, vec = cb.sample(rng, n * slots)
    return vec.reshape(n, slots, cb.dim)
