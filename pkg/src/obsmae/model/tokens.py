"""Patch tokens and fixed sinusoidal position features."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import ObservationCube


@dataclass(frozen=True, eq=False)
class TokenSet:
    """Raw (pre-projection) patches of one modality.

    ``tokens`` is (N, C*p*p) with invalid cells zero-filled, ``index`` is
    (N, 3) holding (t, i, j), ``valid`` is False for any patch touching an
    invalid cell.
    """

    modality: str
    tokens: np.ndarray
    index: np.ndarray
    valid: np.ndarray
    shape: tuple[int, int, int, int]  # source cube (C, T, H, W)

    def __len__(self):
        return len(self.valid)

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())


def patchify(cube: ObservationCube, patch: int) -> TokenSet:
    C, T, H, W = cube.values.shape
    if H % patch or W % patch:
        raise ValueError(f"{cube.modality}: window ({H}, {W}) not divisible by patch {patch}")
    nh, nw = H // patch, W // patch
    vals = np.where(cube.valid, cube.values, 0.0).astype(np.float32)
    x = vals.reshape(C, T, nh, patch, nw, patch).transpose(1, 2, 4, 0, 3, 5)
    tokens = np.ascontiguousarray(x.reshape(T * nh * nw, C * patch * patch))
    v = cube.valid.reshape(C, T, nh, patch, nw, patch).all(axis=(0, 3, 5)).reshape(-1)
    t, i, j = np.meshgrid(np.arange(T), np.arange(nh), np.arange(nw), indexing="ij")
    index = np.stack([t.ravel(), i.ravel(), j.ravel()], axis=1)
    return TokenSet(cube.modality, tokens, index, v, (C, T, H, W))


def unpatchify(tokens: np.ndarray, shape, patch: int) -> np.ndarray:
    """Inverse of patchify's flattening; ``tokens`` may carry leading batch dims."""
    C, T, H, W = shape
    nh, nw = H // patch, W // patch
    lead = tokens.shape[:-2]
    x = tokens.reshape(lead + (T, nh, nw, C, patch, patch))
    k = len(lead)
    perm = tuple(range(k)) + tuple(k + p for p in (3, 0, 1, 4, 2, 5))
    return x.transpose(perm).reshape(lead + (C, T, H, W))


def token_index(T: int, grid_side: int) -> np.ndarray:
    t, i, j = np.meshgrid(np.arange(T), np.arange(grid_side), np.arange(grid_side), indexing="ij")
    return np.stack([t.ravel(), i.ravel(), j.ravel()], axis=1)


def posenc_sincos(indices, dim: int) -> np.ndarray:
    """Concatenated per-axis sin/cos features, interleaved (sin, cos) pairs.

    ``indices`` is (N, A).  Each axis gets ``dim // A`` features.
    """
    idx = np.asarray(indices, dtype=np.float64)
    if idx.ndim == 1:
        idx = idx[:, None]
    n_axes = idx.shape[1]
    if dim % 2 or dim % n_axes or (dim // n_axes) % 2:
        raise ValueError(f"dim {dim} must split into an even number of features for each of {n_axes} axes")
    per = dim // n_axes
    omega = 1.0 / 10000 ** (np.arange(per // 2) * 2.0 / per)
    out = np.empty((idx.shape[0], dim))
    for a in range(n_axes):
        ang = idx[:, a : a + 1] * omega[None, :]
        block = out[:, a * per : (a + 1) * per]
        block[:, 0::2] = np.sin(ang)
        block[:, 1::2] = np.cos(ang)
    return out
