"""Cellular quality branch: mask handling, per-cell encoders, Aggr-RWKV."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import tensor as T
from .nn import Conv2d, Linear, Module, uniform_param
from .tensor import Tensor
from .wkv import BiWKV


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius < 1:
        return mask.astype(bool)
    se = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    return ndimage.binary_dilation(mask.astype(bool), structure=se)


def derive_membrane_mask(nuc: np.ndarray, radius: int = 2) -> np.ndarray:
    """Square-element dilation of the nuclear mask minus the mask itself."""
    if radius < 1:
        raise ValueError("dilation radius must be >= 1")
    nuc = np.asarray(nuc).astype(bool)
    return dilate(nuc, radius) & ~nuc


def canonical_labels(labels: np.ndarray) -> np.ndarray:
    """Relabel instances 1..K in (centroid row, centroid col) order."""
    labels = np.asarray(labels)
    ids = [i for i in np.unique(labels) if i != 0]
    if not ids:
        return np.zeros(labels.shape, dtype=np.int64)
    cents = ndimage.center_of_mass(np.ones(labels.shape), labels, ids)
    order = sorted(range(len(ids)), key=lambda j: (cents[j][0], cents[j][1], ids[j]))
    out = np.zeros(labels.shape, dtype=np.int64)
    for new, j in enumerate(order, start=1):
        out[labels == ids[j]] = new
    return out


@dataclass
class MaskPair:
    nuc: np.ndarray          # bool (H, W)
    mem: np.ndarray          # bool (H, W)
    labels: np.ndarray       # int (H, W), 0 background, 1..K cells
    radius: int = 2

    @classmethod
    def from_labels(cls, labels: np.ndarray, radius: int = 2) -> MaskPair:
        labels = canonical_labels(labels)
        nuc = labels > 0
        return cls(nuc=nuc, mem=derive_membrane_mask(nuc, radius), labels=labels, radius=radius)

    @property
    def count(self) -> int:
        return int(self.labels.max()) if self.labels.size else 0

    def instance_membrane(self, k: int) -> np.ndarray:
        return dilate(self.labels == k, self.radius) & ~self.nuc


def extract_cell_crops(image: np.ndarray, masks: MaskPair, crop: int = 24) -> tuple[np.ndarray, np.ndarray]:
    """Masked per-instance crops, each centred on the cell's bounding box.

    Returns (nucleus_crops, membrane_crops), both (K, C, crop, crop);
    pixels outside the image are zero.
    """
    c, h, w = image.shape
    k_count = masks.count
    nuc_out = np.zeros((k_count, c, crop, crop), dtype=image.dtype)
    mem_out = np.zeros_like(nuc_out)
    if k_count == 0:
        return nuc_out, mem_out
    padded = np.zeros((c, h + 2 * crop, w + 2 * crop), dtype=image.dtype)
    padded[:, crop:crop + h, crop:crop + w] = image
    for k in range(1, k_count + 1):
        nuc_k = masks.labels == k
        mem_k = masks.instance_membrane(k)
        rows, cols = np.nonzero(nuc_k | mem_k)
        cy = (rows.min() + rows.max() + 1) // 2
        cx = (cols.min() + cols.max() + 1) // 2
        y0, x0 = cy - crop // 2 + crop, cx - crop // 2 + crop
        window = padded[:, y0:y0 + crop, x0:x0 + crop]
        mpad = np.zeros((h + 2 * crop, w + 2 * crop), dtype=bool)
        for dst, m in ((nuc_out, nuc_k), (mem_out, mem_k)):
            mpad[crop:crop + h, crop:crop + w] = m
            dst[k - 1] = window * mpad[y0:y0 + crop, x0:x0 + crop]
    return nuc_out, mem_out


class CellEncoder(Module):
    """Two 3x3 convs with ReLU, global average pool, linear to the cell dim."""

    def __init__(self, rng, cell_dim: int, widths=(8, 16), dtype=np.float32):
        self.conv1 = Conv2d(rng, 3, widths[0], 3, padding=1, dtype=dtype)
        self.conv2 = Conv2d(rng, widths[0], widths[1], 3, padding=1, dtype=dtype)
        self.head = Linear(rng, widths[1], cell_dim, dtype=dtype)
        self.cell_dim = cell_dim

    def forward(self, crops: Tensor) -> Tensor:
        if crops.shape[0] == 0:
            return Tensor(np.zeros((0, self.cell_dim), dtype=crops.dtype))
        h = T.relu(self.conv2(T.relu(self.conv1(crops))))
        return self.head(T.mean(h, axis=(2, 3)))


@dataclass
class CellEmbeddings:
    nucleus: Tensor    # (K, D_c)
    membrane: Tensor   # (K, D_c)

    @property
    def count(self) -> int:
        return self.nucleus.shape[0]

    def sequence(self) -> Tensor:
        """Membrane tokens followed by nucleus tokens (2K, D_c)."""
        return T.concat([self.membrane, self.nucleus], axis=0)


def encode_cells(nuc_crops, mem_crops, enc_nuc: CellEncoder, enc_mem: CellEncoder) -> CellEmbeddings:
    nuc_crops = T.as_tensor(nuc_crops, dtype=enc_nuc.head.weight.dtype)
    mem_crops = T.as_tensor(mem_crops, dtype=enc_mem.head.weight.dtype)
    return CellEmbeddings(nucleus=enc_nuc(nuc_crops), membrane=enc_mem(mem_crops))


class AggrRWKV(Module):
    """One Bi-WKV layer over the 2K cell tokens, mean pool, projection to D.

    Patches without cells fall back to a learned default vector. With
    ``use_rwkv=False`` the WKV layer is skipped (plain average pooling).
    """

    def __init__(self, rng, cell_dim: int, dim: int, use_rwkv: bool = True, dtype=np.float32):
        self.mix = BiWKV(rng, cell_dim, dtype=dtype) if use_rwkv else None
        self.proj = Linear(rng, cell_dim, dim, dtype=dtype)
        self.default = uniform_param(rng, (dim,), dim, dtype)

    def forward(self, emb: CellEmbeddings, perm: np.ndarray | None = None, reference: bool = False) -> Tensor:
        if emb.count == 0:
            return self.default
        seq = emb.sequence()
        if perm is not None:
            seq = T.getitem(seq, np.asarray(perm))
        if self.mix is not None:
            seq = self.mix(seq, reference=reference)
        return self.proj(T.mean(seq, axis=0))
