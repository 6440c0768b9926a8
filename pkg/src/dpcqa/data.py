"""Synthetic H&E-like patches, parametric degradations, and dataset I/O.

Images travel as 8-bit binary PPM (P6, RGB) and PGM (P5, instance labels).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .cellular import MaskPair, canonical_labels, dilate

ARTEFACTS = ("staining", "membrane", "nucleus")
TARGETS = ("global", "membrane", "nucleus")

# colours in [0, 1] RGB
_EOSIN = np.array([0.92, 0.70, 0.80])
_HEMATOXYLIN = np.array([0.33, 0.20, 0.52])
_MEMBRANE = np.array([0.62, 0.36, 0.58])

# artefact labels are attached only when a component's severity share reaches this
LABEL_MIN_SEVERITY = 0.1


class ImageFormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


# -- PPM / PGM ------------------------------------------------------------------------

def _read_header(blob: bytes) -> tuple[bytes, list[int], list[int], int]:
    """Magic, integer fields, byte offsets of those fields, and payload start."""
    pos = 0
    tokens: list[bytes] = []
    starts: list[int] = []
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace() and blob[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated header", pos)
        tokens.append(blob[start:pos])
        starts.append(start)
        if len(tokens) == 1 and tokens[0] not in (b"P5", b"P6"):
            raise ImageFormatError(f"bad magic number {tokens[0]!r}", 0)
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise ImageFormatError("missing whitespace after header", pos)
    values = []
    for tok, start in zip(tokens[1:], starts[1:]):
        if not tok.isdigit():
            raise ImageFormatError(f"non-integer header field {tok!r}", start)
        values.append(int(tok))
    return tokens[0], values, starts[1:], pos + 1


def decode_pnm(blob: bytes) -> np.ndarray:
    """Raw 8-bit samples: (H, W) for P5, (H, W, 3) for P6."""
    magic, (w, h, maxval), offsets, start = _read_header(blob)
    if maxval != 255:
        raise ImageFormatError(f"maxval {maxval} unsupported, need 255", offsets[2])
    if w <= 0 or h <= 0:
        raise ImageFormatError(f"bad dimensions {w}x{h}", offsets[0])
    ch = 3 if magic == b"P6" else 1
    need = w * h * ch
    if len(blob) - start < need:
        raise ImageFormatError(f"payload truncated: need {need} bytes, have {len(blob) - start}", len(blob))
    arr = np.frombuffer(blob[start:start + need], dtype=np.uint8)
    return arr.reshape((h, w, 3) if ch == 3 else (h, w)).copy()


def encode_pnm(samples: np.ndarray) -> bytes:
    samples = np.asarray(samples, dtype=np.uint8)
    if samples.ndim == 3:
        h, w, _ = samples.shape
        magic = b"P6"
    else:
        h, w = samples.shape
        magic = b"P5"
    return magic + f"\n{w} {h}\n255\n".encode() + samples.tobytes()


def to_bytes(image: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint8 with round-half-up."""
    return np.clip(np.floor(np.asarray(image, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def load_image(path) -> np.ndarray:
    """PPM -> (3, H, W) float32 in [0, 1]; PGM -> (1, H, W)."""
    raw = decode_pnm(Path(path).read_bytes())
    arr = raw.astype(np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy() if arr.ndim == 3 else arr[None]


def save_image(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[0] == 3:
        samples = to_bytes(image).transpose(1, 2, 0)
    else:
        samples = to_bytes(image.reshape(image.shape[-2:]))
    Path(path).write_bytes(encode_pnm(samples))


def load_labels(path) -> np.ndarray:
    raw = decode_pnm(Path(path).read_bytes())
    if raw.ndim != 2:
        raise ImageFormatError("label mask must be P5", 0)
    return raw.astype(np.int64)


def save_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.max(initial=0) > 255:
        raise ValueError("at most 255 instances fit an 8-bit mask")
    Path(path).write_bytes(encode_pnm(labels.astype(np.uint8)))


# -- synthesis ------------------------------------------------------------------------

@dataclass
class DegradationSpec:
    blur_sigma: float = 0.0
    stain_gain: tuple[float, float, float] = (1.0, 1.0, 1.0)
    stain_offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    noise_sigma: float = 0.0
    target: str = "global"
    noise_seed: int = 0

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}")
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise ValueError("sigmas must be >= 0")

    @property
    def stain_norm(self) -> float:
        dev = np.concatenate([np.asarray(self.stain_gain) - 1.0, np.asarray(self.stain_offset)])
        return float(np.linalg.norm(dev))

    def components(self) -> dict[str, float]:
        return {
            "blur": 0.6 * min(self.blur_sigma / 3.0, 1.0),
            "stain": 0.25 * self.stain_norm / 0.5,
            "noise": 0.15 * min(self.noise_sigma / 0.1, 1.0),
        }

    def severity(self) -> float:
        return float(min(max(sum(self.components().values()), 0.0), 1.0))


def severity(spec: DegradationSpec) -> float:
    return spec.severity()


@dataclass
class SynthPatch:
    image: np.ndarray                 # (3, H, W) float32 in [0, 1]
    masks: MaskPair
    s_star: float = 1.0
    artefact_labels: frozenset = field(default_factory=frozenset)
    patch_id: str = ""

    @property
    def n_cells(self) -> int:
        return self.masks.count


def generate_clean_patch(seed: int, h: int = 32, w: int = 32, n_cells: int = 6, radius: int = 2, patch_id: str = "") -> SynthPatch:
    """Uniform eosin background with non-overlapping elliptical nuclei and membrane rims.

    Nuclei that cannot be placed after a bounded number of retries are
    skipped; the mask records what was actually rendered.
    """
    if n_cells < 0:
        raise ValueError("n_cells must be >= 0")
    if h < 32 or w < 32:
        raise ValueError("patches must be at least 32x32")
    rng = np.random.default_rng([seed, 7])
    background = np.clip(_EOSIN + rng.uniform(-0.02, 0.02, 3), 0, 1)
    image = np.broadcast_to(background[:, None, None], (3, h, w)).copy()
    labels = np.zeros((h, w), dtype=np.int64)
    yy, xx = np.mgrid[0:h, 0:w]
    placed: list[tuple[float, float, float]] = []
    margin = radius + 1
    for _ in range(n_cells):
        for _attempt in range(200):
            a = rng.uniform(2.0, 3.5)
            b = a * rng.uniform(0.6, 1.0)
            cy = rng.uniform(margin + a, h - margin - a)
            cx = rng.uniform(margin + a, w - margin - a)
            if all(math.hypot(cy - py, cx - px) > a + pa + 2 * radius + 1 for py, px, pa in placed):
                break
        else:
            continue
        theta = rng.uniform(0, math.pi)
        dy, dx = yy - cy, xx - cx
        u = (dx * math.cos(theta) + dy * math.sin(theta)) / a
        v = (-dx * math.sin(theta) + dy * math.cos(theta)) / b
        inside = u * u + v * v <= 1.0
        if not inside.any():
            continue
        placed.append((cy, cx, a))
        labels[inside] = len(placed)
    masks = MaskPair.from_labels(labels, radius)
    if masks.count:
        rim = masks.mem
        image[:, rim] = 0.5 * image[:, rim] + 0.5 * _MEMBRANE[:, None]
        chroma = rng.uniform(-0.06, 0.06, size=(h, w))
        nuc = masks.nuc
        image[:, nuc] = _HEMATOXYLIN[:, None] + chroma[nuc][None]
    return SynthPatch(np.clip(image, 0, 1).astype(np.float32), masks, 1.0, frozenset(), patch_id)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(int(math.ceil(3 * sigma)), 1)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur of a (C, H, W) image, radius ceil(3 sigma), reflect padding."""
    if sigma <= 0:
        return image.copy()
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    out = image.astype(np.float64)
    for axis in (1, 2):
        pad = [(0, 0)] * 3
        pad[axis] = (r, r)
        # reflect needs r < size; fall back to symmetric for tiny images
        mode = "reflect" if r < out.shape[axis] else "symmetric"
        p = np.pad(out, pad, mode=mode)
        n = out.shape[axis]
        acc = np.zeros_like(out)
        for i, kv in enumerate(k):
            sl = [slice(None)] * 3
            sl[axis] = slice(i, i + n)
            acc += kv * p[tuple(sl)]
        out = acc
    return out.astype(image.dtype)


def artefact_labels(spec: DegradationSpec) -> frozenset:
    comp = spec.components()
    labels = set()
    if comp["stain"] >= LABEL_MIN_SEVERITY:
        labels.add("staining")
    if comp["blur"] >= LABEL_MIN_SEVERITY:
        if spec.target in ("global", "membrane"):
            labels.add("membrane")
        if spec.target in ("global", "nucleus"):
            labels.add("nucleus")
    return frozenset(labels)


def apply_degradation(p: SynthPatch, d: DegradationSpec) -> SynthPatch:
    """Blur (global or restricted to a 1-px dilation of the target mask), channel
    affine stain shift, additive Gaussian noise, clamp. Masks are untouched."""
    img = p.image.astype(np.float64)
    if d.blur_sigma > 0:
        blurred = gaussian_blur(img, d.blur_sigma)
        if d.target == "global":
            img = blurred
        else:
            region = dilate(p.masks.mem if d.target == "membrane" else p.masks.nuc, 1)
            img = np.where(region[None], blurred, img)
    gain = np.asarray(d.stain_gain, dtype=np.float64)[:, None, None]
    offset = np.asarray(d.stain_offset, dtype=np.float64)[:, None, None]
    img = img * gain + offset
    if d.noise_sigma > 0:
        img = img + np.random.default_rng([d.noise_seed, 11]).normal(0.0, d.noise_sigma, img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    s_star = min(p.s_star, 1.0 - d.severity())
    return replace(p, image=img, s_star=float(min(max(s_star, 0.0), 1.0)), artefact_labels=p.artefact_labels | artefact_labels(d))


def _split_severity(total: float, props: np.ndarray) -> np.ndarray:
    """Share ``total`` across (blur, stain, noise) by ``props`` within per-component caps."""
    caps = np.array([0.6, 0.3, 0.15])
    total = min(total, caps.sum())
    parts = np.zeros(3)
    free = np.ones(3, dtype=bool)
    remaining = total
    while remaining > 1e-12 and free.any():
        share = props * free
        share = share / share.sum() * remaining
        room = caps - parts
        take = np.minimum(share, room)
        parts += take
        remaining -= take.sum()
        free &= parts < caps - 1e-12
    return parts


def sample_degradation(rng: np.random.Generator, target_severity: float, noise_seed: int) -> DegradationSpec:
    props = rng.dirichlet([1.0, 1.0, 1.0])
    blur, stain, noise = _split_severity(target_severity, props)
    # gain and offset deviations share a sign per channel so they never cancel
    signs = rng.choice([-1.0, 1.0], size=3)
    direction = np.abs(rng.normal(size=6)) * np.concatenate([signs, signs])
    direction /= np.linalg.norm(direction)
    stain_norm = stain / 0.25 * 0.5
    dev = direction * stain_norm
    target = TARGETS[rng.choice(3, p=[0.5, 0.25, 0.25])]
    return DegradationSpec(
        blur_sigma=float(3.0 * blur / 0.6),
        stain_gain=tuple(float(1.0 + x) for x in dev[:3]),
        stain_offset=tuple(float(x) for x in dev[3:]),
        noise_sigma=float(0.1 * noise / 0.15),
        target=target,
        noise_seed=noise_seed,
    )


@dataclass
class Dataset:
    patches: list[SynthPatch]
    splits: dict[str, str]            # patch_id -> split
    specs: dict[str, DegradationSpec]

    def subset(self, split: str) -> list[SynthPatch]:
        return [p for p in self.patches if self.splits[p.patch_id] == split]

    def manifest_rows(self) -> list[dict]:
        return [
            {
                "id": p.patch_id,
                "split": self.splits[p.patch_id],
                "s_star": f"{p.s_star:.6f}",
                "labels": ";".join(sorted(p.artefact_labels)),
                "n_cells": str(p.n_cells),
            }
            for p in self.patches
        ]


MANIFEST_FIELDS = ("id", "split", "s_star", "labels", "n_cells")


def split_sizes(n: int) -> tuple[int, int, int]:
    n_train = int(round(0.7 * n))
    n_val = int(round(0.1 * n))
    return n_train, n_val, n - n_train - n_val


def synth_dataset(seed: int, n_patches: int, h: int = 32, w: int = 32, radius: int = 2, max_cells: int | None = None) -> Dataset:
    """Seeded dataset with severities stratified over [0, 1] and a 70/10/20 split.

    s_star is the stored 8-bit-exact value: ``1 - severity`` rounded to 6 decimals.
    """
    if n_patches < 10:
        raise ValueError("need at least 10 patches")
    rng = np.random.default_rng([seed, 1])
    if max_cells is None:
        max_cells = max(3, int(round(6 * h * w / 1024)))
    strata = rng.permutation(n_patches)
    patches: list[SynthPatch] = []
    specs: dict[str, DegradationSpec] = {}
    for i in range(n_patches):
        pid = f"p{i:05d}"
        n_cells = int(rng.integers(2, max_cells + 1))
        clean = generate_clean_patch(int(rng.integers(2**31)), h, w, n_cells, radius, patch_id=pid)
        target_sev = (strata[i] + rng.uniform()) / n_patches
        spec = sample_degradation(rng, target_sev, noise_seed=int(rng.integers(2**31)))
        deg = apply_degradation(clean, spec)
        deg = replace(deg, s_star=round(deg.s_star, 6))
        patches.append(deg)
        specs[pid] = spec
    n_train, n_val, _ = split_sizes(n_patches)
    order = np.random.default_rng([seed, 2]).permutation(n_patches)
    splits = {}
    for rank, idx in enumerate(order):
        splits[patches[idx].patch_id] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
    return Dataset(patches, splits, specs)


def write_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for p in ds.patches:
        save_image(out / f"{p.patch_id}.ppm", p.image)
        save_labels(out / f"{p.patch_id}.mask.pgm", p.masks.labels)
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(ds.manifest_rows())
    return manifest


@dataclass
class ManifestEntry:
    patch_id: str
    split: str
    s_star: float
    labels: frozenset
    n_cells: int


def read_manifest(path) -> list[ManifestEntry]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: manifest missing columns {sorted(missing)}")
        for row in reader:
            labels = frozenset(x for x in row["labels"].split(";") if x)
            rows.append(ManifestEntry(row["id"], row["split"], float(row["s_star"]), labels, int(row["n_cells"])))
    return rows


def load_patch(directory, patch_id: str, radius: int = 2) -> SynthPatch:
    """Read ``{id}.ppm`` plus ``{id}.mask.pgm`` (missing mask = no cells)."""
    directory = Path(directory)
    image = load_image(directory / f"{patch_id}.ppm")
    if image.shape[0] != 3:
        raise ImageFormatError(f"{patch_id}.ppm is not RGB", 0)
    mask_path = directory / f"{patch_id}.mask.pgm"
    labels = load_labels(mask_path) if mask_path.exists() else np.zeros(image.shape[1:], dtype=np.int64)
    if labels.shape != image.shape[1:]:
        raise ValueError(f"{patch_id}: mask {labels.shape} does not match image {image.shape[1:]}")
    return SynthPatch(image, MaskPair.from_labels(canonical_labels(labels), radius), 1.0, frozenset(), patch_id)


def load_dataset(directory, radius: int = 2) -> tuple[list[ManifestEntry], dict[str, SynthPatch]]:
    directory = Path(directory)
    entries = read_manifest(directory / "manifest.csv")
    patches = {}
    for e in entries:
        p = load_patch(directory, e.patch_id, radius)
        patches[e.patch_id] = replace(p, s_star=e.s_star, artefact_labels=e.labels)
    return entries, patches
