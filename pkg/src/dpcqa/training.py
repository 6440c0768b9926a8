"""Deterministic training loop with early stopping and resumable checkpoints."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config
from .data import SynthPatch
from .losses import diff_pairs, loss_aggr, loss_diff, loss_reg, loss_wavelet, total_loss
from .model import DPCQANet, ModelOutput, PatchInput
from .optim import Adam, AdamState
from .tensor import Tensor

logger = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "train_loss", "val_loss", "l_reg", "l_diff", "l_wavelet", "l_aggr", "l_sub")

# named sub-seeds derived from the run seed
_SHUFFLE, _PAIRING, _PERMUTATION = 1001, 1002, 1003


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainItem:
    inp: PatchInput
    s_star: float
    t_nuc: float
    t_mem: float


def make_items(model: DPCQANet, patches: list[SynthPatch]) -> list[TrainItem]:
    items = []
    for p in patches:
        t_nuc = 0.0 if "nucleus" in p.artefact_labels else 1.0
        t_mem = 0.0 if "membrane" in p.artefact_labels else 1.0
        items.append(TrainItem(model.prepare(p.image, p.masks, p.patch_id), p.s_star, t_nuc, t_mem))
    return items


def batch_losses(model: DPCQANet, items: list[TrainItem], cfg: Config, pair_rng, perm_rng) -> tuple[Tensor, dict[str, float], ModelOutput]:
    tc, w = cfg.train, cfg.loss
    out = model.forward([it.inp for it in items])
    s_star = np.array([it.s_star for it in items])
    l_reg = loss_reg(out.s_stain, s_star)
    l_diff = loss_diff(out.s_stain, s_star, diff_pairs(len(items), pair_rng)) if tc.use_l_diff else None
    l_wav = None
    if tc.use_l_wavelet:
        images = np.stack([it.inp.image for it in items]).astype(model.dtype)
        l_wav = loss_wavelet(images, out.recon, model.cfg.wavelet_levels)
    l_aggr = None
    if tc.use_l_aggr:
        terms = [
            loss_aggr(emb, model.aggr, perm_rng, canonical=out.f_cell[i])
            for i, emb in enumerate(out.embeddings)
        ]
        l_aggr = T.mean(T.stack(terms))
    t_sub = np.array([[it.t_nuc, it.t_mem] for it in items])
    l_sub = (loss_reg(out.s_nuc, t_sub[:, 0]) + loss_reg(out.s_mem, t_sub[:, 1])) * 0.5
    loss = total_loss(l_reg, l_diff, l_wav, l_aggr, w, l_sub=l_sub)
    parts = {
        "l_reg": l_reg.item(),
        "l_diff": l_diff.item() if l_diff is not None else 0.0,
        "l_wavelet": l_wav.item() if l_wav is not None else 0.0,
        "l_aggr": l_aggr.item() if l_aggr is not None else 0.0,
        "l_sub": l_sub.item(),
    }
    return loss, parts, out


def predict(model: DPCQANet, inputs: list[PatchInput], batch_size: int = 16) -> dict[str, np.ndarray]:
    chunks = [model.predict(inputs[i:i + batch_size]) for i in range(0, len(inputs), batch_size)]
    if not chunks:
        return {"s_stain": np.zeros(0), "s_nuc": np.zeros(0), "s_mem": np.zeros(0)}
    return {k: np.concatenate([c[k] for c in chunks]) for k in ("s_stain", "s_nuc", "s_mem")}


def validation_l1(model: DPCQANet, items: list[TrainItem], batch_size: int) -> float:
    if not items:
        return float("nan")
    pred = predict(model, [it.inp for it in items], batch_size)["s_stain"]
    return float(np.mean(np.abs(pred - np.array([it.s_star for it in items]))))


@dataclass
class TrainResult:
    model: DPCQANet
    log: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = math.inf


def _state_tensors(model: DPCQANet, opt: Adam, best: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {f"param.{k}": v for k, v in model.state_dict().items()}
    out.update({f"best.{k}": v for k, v in best.items()})
    out.update({f"adam_m.{k}": v for k, v in opt.state.m.items()})
    out.update({f"adam_v.{k}": v for k, v in opt.state.v.items()})
    return out


def save_model(path, model: DPCQANet, cfg: Config, meta: dict | None = None) -> None:
    info = {"config": cfg.to_dict(), **(meta or {})}
    save_checkpoint(path, {f"param.{k}": v for k, v in model.state_dict().items()}, meta=info)


def load_model(path) -> tuple[DPCQANet, Config]:
    tensors, meta = load_checkpoint(path)
    cfg = Config.from_dict(meta["config"])
    model = DPCQANet(cfg.model, seed=cfg.train.seed)
    model.load_state_dict({k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")})
    return model, cfg


def _write_log(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (row[k] if k == "epoch" else f"{row[k]:.8f}") for k in LOG_FIELDS})


def train(
    train_patches: list[SynthPatch],
    val_patches: list[SynthPatch],
    cfg: Config,
    out_dir=None,
    resume=None,
) -> TrainResult:
    """Seeded Adam training; returns the best-validation model.

    With ``out_dir`` the loop writes ``train_log.csv``, ``best.ckpt`` and a
    resumable ``last.ckpt`` after every epoch.
    """
    tc = cfg.train
    model = DPCQANet(cfg.model, seed=tc.seed)
    train_items = make_items(model, train_patches)
    val_items = make_items(model, val_patches)
    opt = Adam(model.named_parameters(), AdamState(lr=tc.lr, weight_decay=tc.weight_decay))
    best = {k: v.copy() for k, v in model.state_dict().items()}
    result = TrainResult(model)
    start_epoch, bad_epochs = 0, 0

    if resume is not None:
        tensors, meta = load_checkpoint(resume)
        model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("param.")})
        best = {k[5:]: v for k, v in tensors.items() if k.startswith("best.")}
        for name in opt.params:
            opt.state.m[name] = tensors[f"adam_m.{name}"].copy()
            opt.state.v[name] = tensors[f"adam_v.{name}"].copy()
        opt.state.t = int(meta["adam_t"])
        start_epoch = int(meta["epoch"]) + 1
        bad_epochs = int(meta["bad_epochs"])
        result.best_epoch = int(meta["best_epoch"])
        result.best_val = float(meta["best_val"])
        result.log = list(meta["log"])

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume is not None and result.best_epoch >= 0:
            # re-stamp under the current config so resumed runs match uninterrupted ones
            save_checkpoint(
                out / "best.ckpt",
                {f"param.{k}": v for k, v in best.items()},
                meta={"config": cfg.to_dict(), "epoch": result.best_epoch, "val_loss": result.best_val},
            )

    n = len(train_items)
    bs = tc.batch_size
    for epoch in range(start_epoch, tc.max_epochs):
        if bad_epochs >= tc.patience:
            break
        order = np.random.default_rng([tc.seed, _SHUFFLE, epoch]).permutation(n)
        sums = dict.fromkeys(("loss", "l_reg", "l_diff", "l_wavelet", "l_aggr", "l_sub"), 0.0)
        n_batches = 0
        for b, start in enumerate(range(0, n, bs)):
            items = [train_items[i] for i in order[start:start + bs]]
            pair_rng = np.random.default_rng([tc.seed, _PAIRING, epoch, b])
            perm_rng = np.random.default_rng([tc.seed, _PERMUTATION, epoch, b])
            opt.zero_grad()
            parts = {}
            try:
                loss, parts, _ = batch_losses(model, items, cfg, pair_rng, perm_rng)
                if not np.isfinite(loss.data).all():
                    raise FloatingPointError("non-finite loss")
                loss.backward()
                opt.step()
            except FloatingPointError as exc:
                raise TrainingAborted(f"numerical failure at epoch {epoch}, batch {b}: {exc}; terms={parts}") from exc
            sums["loss"] += loss.item()
            for k, v in parts.items():
                sums[k] += v
            n_batches += 1
        val = validation_l1(model, val_items, bs)
        row = {"epoch": epoch, "train_loss": sums["loss"] / n_batches, "val_loss": val}
        row.update({k: sums[k] / n_batches for k in ("l_reg", "l_diff", "l_wavelet", "l_aggr", "l_sub")})
        result.log.append(row)
        logger.info("epoch %d train %.5f val %.5f", epoch, row["train_loss"], val)
        if val < result.best_val:
            result.best_val, result.best_epoch = val, epoch
            best = {k: v.copy() for k, v in model.state_dict().items()}
            bad_epochs = 0
            if out is not None:
                save_model(out / "best.ckpt", model, cfg, {"epoch": epoch, "val_loss": val})
        else:
            bad_epochs += 1
        if out is not None:
            _write_log(out / "train_log.csv", result.log)
            meta = {
                "config": cfg.to_dict(),
                "epoch": epoch,
                "adam_t": opt.state.t,
                "bad_epochs": bad_epochs,
                "best_epoch": result.best_epoch,
                "best_val": result.best_val,
                "log": result.log,
            }
            save_checkpoint(out / "last.ckpt", _state_tensors(model, opt, best), meta=meta)

    model.load_state_dict(best)
    return result
