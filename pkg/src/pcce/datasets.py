"""Training corpora: padded-clean / codec-noisy / mask triples.

Phase 1 uses masked portrait-like images: the background is removed by the
mask, refilled by padding, and the padded image is compressed to produce
the noisy input. Phase 2 swaps in projection atlases, whose occupancy maps
play the role of the masks. A deterministic synthetic portrait generator
(textured blob silhouettes over smooth color fields) stands in for real
portrait data at desk scale.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import MANIFEST_FORMAT_VERSION, pngio
from .codec_sim import CodecConfig, degrade
from .errors import CapacityError, ContractError, FormatError, ValidationError
from .padding import MaskedImage, harmonic_refine, pushpull_fill
from .pointcloud import PointCloud
from .projection import ProjectionConfig, project

log = logging.getLogger(__name__)

GENERATOR_VERSION = 1


@dataclass
class TrainingPair:
    noisy: np.ndarray   # H×W×3 uint8
    clean: np.ndarray   # H×W×3 uint8
    mask: np.ndarray    # H×W bool
    source_id: str = ""
    qp: int = 0
    phase: int = 1

    def __post_init__(self):
        self.noisy = np.asarray(self.noisy)
        self.clean = np.asarray(self.clean)
        self.mask = np.asarray(self.mask).astype(bool)
        if self.noisy.shape != self.clean.shape:
            raise ValidationError("noisy/clean shape mismatch")
        if self.mask.shape != self.clean.shape[:2]:
            raise ValidationError("mask/image shape mismatch")
        if not self.mask.any():
            raise ValidationError("empty mask")


@dataclass
class ManifestItem:
    item_id: str
    source_id: str
    split: str
    qp: int
    phase: int
    noisy: str
    clean: str
    mask: str


@dataclass
class CorpusManifest:
    root: Path
    seed: int
    items: list[ManifestItem] = field(default_factory=list)
    generator_version: int = GENERATOR_VERSION

    def split(self, name: str) -> list[ManifestItem]:
        return [it for it in self.items if it.split == name]

    def load_pair(self, item: ManifestItem) -> TrainingPair:
        return TrainingPair(
            noisy=pngio.read_rgb(self.root / item.noisy),
            clean=pngio.read_rgb(self.root / item.clean),
            mask=pngio.read_mask(self.root / item.mask),
            source_id=item.source_id, qp=item.qp, phase=item.phase)

    def save(self) -> Path:
        data = {
            "format_version": MANIFEST_FORMAT_VERSION,
            "generator_version": self.generator_version,
            "seed": self.seed,
            "items": [vars(it) for it in self.items],
        }
        path = self.root / "manifest.json"
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, root) -> "CorpusManifest":
        root = Path(root)
        path = root / "manifest.json"
        if not path.exists():
            raise FormatError(f"{root}: missing manifest.json")
        data = json.loads(path.read_text())
        if data.get("format_version") != MANIFEST_FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported manifest version")
        return cls(root=root, seed=data["seed"],
                   items=[ManifestItem(**it) for it in data["items"]],
                   generator_version=data["generator_version"])


def build_portrait_pair(image: np.ndarray, mask: np.ndarray, qp: int,
                        source_id: str = "", tol: float = 1e-5,
                        max_iter: int = 2000) -> TrainingPair | None:
    """Mask → pad → compress: one phase-1 training pair.

    The clean target is the padded image (its occupied pixels equal the
    source bit-exactly); the noisy input is the clean target after the
    codec simulation. Returns None (with a log line) for an empty mask.
    """
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        log.warning("skipping %s: empty mask", source_id or "<unnamed>")
        return None
    masked = np.asarray(image).copy()
    masked[~mask] = 0
    mi = MaskedImage(masked, mask)
    clean = harmonic_refine(mi, pushpull_fill(mi), tol=tol, max_iter=max_iter)
    noisy = degrade(clean, CodecConfig(qp=qp))
    return TrainingPair(noisy=noisy, clean=clean, mask=mask,
                        source_id=source_id, qp=qp, phase=1)


def _assign_splits(source_ids: list[str], seed: int, val_fraction: float):
    """Deterministic train/val split, disjoint by source id."""
    uniq = sorted(set(source_ids))
    rng = np.random.default_rng(seed ^ 0x5EED)
    order = rng.permutation(len(uniq))
    n_val = max(1, int(round(val_fraction * len(uniq)))) if len(uniq) > 1 else 0
    val_ids = {uniq[i] for i in order[:n_val]}
    return {sid: ("val" if sid in val_ids else "train") for sid in uniq}


def _write_pair(root: Path, split: str, pair: TrainingPair, item_id: str):
    d = root / split
    d.mkdir(parents=True, exist_ok=True)
    names = {kind: f"{split}/{item_id}_{kind}.png" for kind in ("noisy", "clean", "mask")}
    pngio.write_rgb(pair.noisy, root / names["noisy"])
    pngio.write_rgb(pair.clean, root / names["clean"])
    pngio.write_mask(pair.mask, root / names["mask"])
    return names


def _smooth_field(rng: np.random.Generator, size: int, cells: int = 6) -> np.ndarray:
    """Random smooth RGB field: low-res noise, bilinearly upsampled."""
    low = rng.uniform(30, 225, size=(cells, cells, 3))
    ys = np.linspace(0, cells - 1, size)
    xs = np.linspace(0, cells - 1, size)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, cells - 1)
    x1 = np.minimum(x0 + 1, cells - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = low[np.ix_(y0, x0)] * (1 - fx) + low[np.ix_(y0, x1)] * fx
    bot = low[np.ix_(y1, x0)] * (1 - fx) + low[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def synth_portrait(size: int, rng: np.random.Generator):
    """One textured blob silhouette and its mask.

    The silhouette is a radial Fourier blob re-sampled until its coverage
    lands in [0.2, 0.8]; color is a smooth field plus faint texture noise.
    """
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(64):
        cy = rng.uniform(0.35, 0.65) * size
        cx = rng.uniform(0.35, 0.65) * size
        base = rng.uniform(0.28, 0.42) * size
        nharm = 4
        amp = rng.uniform(0.0, 0.12, size=nharm)
        phs = rng.uniform(0, 2 * math.pi, size=nharm)
        theta = np.arctan2(yy - cy, xx - cx)
        rad = base * (1.0 + sum(a * np.cos((k + 2) * theta + p)
                                for k, (a, p) in enumerate(zip(amp, phs))))
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= rad ** 2
        cov = mask.mean()
        if 0.2 <= cov <= 0.8:
            break
    else:
        raise ContractError("could not generate a blob with coverage in [0.2, 0.8]")
    colors = _smooth_field(rng, size) + rng.normal(0.0, 3.0, size=(size, size, 3))
    image = np.clip(np.rint(colors), 0, 255).astype(np.uint8)
    image[~mask] = 0
    return image, mask


def synth_portrait_corpus(n: int, seed: int, out_root, qp: int = 42,
                          size: int = 128, val_fraction: float = 0.1) -> CorpusManifest:
    """Generate n synthetic portrait pairs under out_root (train/val split)."""
    if n < 1:
        raise ContractError("need n >= 1")
    root = Path(out_root)
    root.mkdir(parents=True, exist_ok=True)
    source_ids = [f"p{i:04d}" for i in range(n)]
    splits = _assign_splits(source_ids, seed, val_fraction)
    manifest = CorpusManifest(root=root, seed=seed)
    for i, sid in enumerate(source_ids):
        rng = np.random.default_rng((seed << 20) + i)
        image, mask = synth_portrait(size, rng)
        pair = build_portrait_pair(image, mask, qp, source_id=sid)
        names = _write_pair(root, splits[sid], pair, f"{sid}_qp{qp}")
        manifest.items.append(ManifestItem(
            item_id=f"{sid}_qp{qp}", source_id=sid, split=splits[sid], qp=qp,
            phase=1, **names))
    manifest.save()
    return manifest


def build_pc_map_corpus(clouds: list[PointCloud], qps: list[int], out_root,
                        cfg: ProjectionConfig = ProjectionConfig(),
                        names: list[str] | None = None, seed: int = 0,
                        val_fraction: float = 0.2) -> CorpusManifest:
    """Project clouds and build per-QP pairs from their attribute atlases.

    clean = padded atlas attribute, mask = occupancy, noisy = degraded
    clean. Clouds whose projection exceeds the atlas capacity are skipped
    and recorded in the manifest order log.
    """
    if not clouds or not qps:
        raise ContractError("need at least one cloud and one qp")
    if names is None:
        names = [f"pc{i:03d}" for i in range(len(clouds))]
    if len(names) != len(clouds):
        raise ContractError("names/clouds length mismatch")
    root = Path(out_root)
    root.mkdir(parents=True, exist_ok=True)
    splits = _assign_splits(list(names), seed, val_fraction)
    manifest = CorpusManifest(root=root, seed=seed)
    for name, cloud in zip(names, clouds):
        try:
            atlas = project(cloud, cfg)
        except CapacityError as exc:
            log.warning("skipping %s: %s", name, exc)
            continue
        padded = pad_atlas_attribute(atlas)
        for qp in qps:
            noisy = degrade(padded, CodecConfig(qp=qp))
            pair = TrainingPair(noisy=noisy, clean=padded, mask=atlas.occupancy,
                                source_id=name, qp=qp, phase=2)
            item_id = f"{name}_qp{qp}"
            files = _write_pair(root, splits[name], pair, item_id)
            manifest.items.append(ManifestItem(
                item_id=item_id, source_id=name, split=splits[name], qp=qp,
                phase=2, **files))
    if not manifest.items:
        raise ContractError("no clouds could be projected")
    manifest.save()
    return manifest


def pad_atlas_attribute(atlas) -> np.ndarray:
    """Padded version of an atlas attribute map (occupied pixels kept)."""
    mi = MaskedImage(atlas.attribute, atlas.occupancy)
    return harmonic_refine(mi, pushpull_fill(mi))
