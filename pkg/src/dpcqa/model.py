"""The assembled dual-stream quality network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .cellular import AggrRWKV, CellEmbeddings, CellEncoder, MaskPair, extract_cell_crops
from .config import ModelConfig
from .fusion import CrossAttention, GatedFusion, Regressor, SubScoreHead
from .global_stream import GlobalStream
from .nn import Module
from .tensor import Tensor


@dataclass
class PatchInput:
    """Model-ready patch: image plus pre-extracted masked cell crops."""

    image: np.ndarray        # (3, H, W) in [0, 1]
    nuc_crops: np.ndarray    # (K, 3, c, c)
    mem_crops: np.ndarray    # (K, 3, c, c)
    patch_id: str = ""

    @property
    def n_cells(self) -> int:
        return self.nuc_crops.shape[0]

    @classmethod
    def build(cls, image: np.ndarray, masks: MaskPair, crop: int, patch_id: str = "") -> PatchInput:
        nuc, mem = extract_cell_crops(image, masks, crop)
        return cls(image=image, nuc_crops=nuc, mem_crops=mem, patch_id=patch_id)


@dataclass
class ModelOutput:
    s_stain: Tensor          # (B,)
    s_nuc: Tensor            # (B,)
    s_mem: Tensor            # (B,)
    attention: Tensor        # (B, N_tok)
    recon: Tensor            # (B, 3, H, W)
    f_global: Tensor
    f_cell: Tensor           # (B, D)
    f_fusion: Tensor
    f_fused: Tensor
    embeddings: list[CellEmbeddings]
    grid: tuple[int, int]


class DPCQANet(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        dtype = np.dtype(cfg.dtype).type
        rng = np.random.default_rng([seed, 101])
        d, dc = cfg.hidden_dim, cfg.cell_dim
        self.cfg = cfg
        self.dtype = dtype
        self.global_stream = GlobalStream(rng, cfg.stem_channels, d, use_wcg=cfg.use_wcg, dtype=dtype)
        self.enc_nuc = CellEncoder(rng, dc, tuple(cfg.encoder_widths), dtype=dtype)
        self.enc_mem = CellEncoder(rng, dc, tuple(cfg.encoder_widths), dtype=dtype)
        self.aggr = AggrRWKV(rng, dc, d, use_rwkv=cfg.use_aggr_rwkv, dtype=dtype)
        self.cross = CrossAttention(rng, d, dtype=dtype) if cfg.use_cross_attention else None
        self.gate = GatedFusion(rng, d, dtype=dtype)
        self.regressor = Regressor(rng, d, cfg.mlp_hidden, dtype=dtype)
        self.head_nuc = SubScoreHead(rng, dc, dtype=dtype)
        self.head_mem = SubScoreHead(rng, dc, dtype=dtype)

    def prepare(self, image: np.ndarray, masks: MaskPair, patch_id: str = "") -> PatchInput:
        return PatchInput.build(image.astype(self.dtype), masks, self.cfg.crop_size, patch_id)

    def embed_cells(self, batch: list[PatchInput]) -> list[CellEmbeddings]:
        dc = self.cfg.cell_dim
        counts = [p.n_cells for p in batch]
        if sum(counts):
            nuc_all = np.concatenate([p.nuc_crops for p in batch]).astype(self.dtype)
            mem_all = np.concatenate([p.mem_crops for p in batch]).astype(self.dtype)
            tok_nuc = self.enc_nuc(Tensor(nuc_all))
            tok_mem = self.enc_mem(Tensor(mem_all))
        out = []
        off = 0
        for k in counts:
            if k == 0:
                empty = Tensor(np.zeros((0, dc), dtype=self.dtype))
                out.append(CellEmbeddings(empty, empty))
                continue
            sl = slice(off, off + k)
            out.append(CellEmbeddings(tok_nuc[sl], tok_mem[sl]))
            off += k
        return out

    def forward(self, batch: list[PatchInput]) -> ModelOutput:
        images = Tensor(np.stack([p.image for p in batch]).astype(self.dtype))
        g = self.global_stream(images)
        f_global = g["f_global"]
        embs = self.embed_cells(batch)
        f_cell = T.stack([self.aggr(e) for e in embs], axis=0)
        if self.cross is not None:
            f_fusion, attn = self.cross(f_cell, f_global)
        else:
            f_fusion = T.mean(f_global, axis=1)
            n = f_global.shape[1]
            attn = Tensor(np.full((len(batch), n), 1.0 / n, dtype=self.dtype))
        fused = self.gate(f_fusion, f_cell)
        s_stain = self.regressor(fused)
        zero = Tensor(np.zeros(self.cfg.cell_dim, dtype=self.dtype))
        pooled_nuc = T.stack([T.mean(e.nucleus, axis=0) if e.count else zero for e in embs])
        pooled_mem = T.stack([T.mean(e.membrane, axis=0) if e.count else zero for e in embs])
        return ModelOutput(
            s_stain=s_stain,
            s_nuc=self.head_nuc(pooled_nuc),
            s_mem=self.head_mem(pooled_mem),
            attention=attn,
            recon=g["recon"],
            f_global=f_global,
            f_cell=f_cell,
            f_fusion=f_fusion,
            f_fused=fused,
            embeddings=embs,
            grid=g["grid"],
        )

    def predict(self, batch: list[PatchInput]) -> dict[str, np.ndarray]:
        with T.no_grad():
            out = self.forward(batch)
        return {
            "s_stain": out.s_stain.data.astype(np.float64),
            "s_nuc": out.s_nuc.data.astype(np.float64),
            "s_mem": out.s_mem.data.astype(np.float64),
            "attention": out.attention.data.astype(np.float64),
            "grid": out.grid,
        }
