"""Synthetic exposure degradation: clean/corrupted training pairs.

Exposure change is modeled through a beta-gamma camera response applied at a
given exposure ratio k:

    f(P, k) = e^{b*(1 - k^a)} * P^(k^a)

with the standard response constants a=-0.3293, b=1.1258. The user-facing
exposure value E in (-1, 1) maps to k = g^E (g=2 by default), so E=0 is the
identity, E>0 brightens and E<0 darkens. `build_dataset` writes degraded
PNGs next to re-encoded clean copies and a tab-separated manifest with a
seeded train/test split.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, InputError
from .imgio import list_images, read_image, write_image
from .seeding import substream

__all__ = [
    "CrfModel", "ManifestRecord", "DatasetManifest",
    "lecarm_apply", "build_dataset", "write_demo_sources",
    "read_manifest", "write_manifest",
]

# Pairs with |E| below this are resampled: they would be near-identity no-ops.
MIN_ABS_EXPOSURE = 0.05


@dataclass
class CrfModel:
    """Camera response constants and the exposure-ratio base."""
    a: float = -0.3293
    b: float = 1.1258
    gain_scale: float = 2.0

    def __post_init__(self):
        if self.a == 0:
            raise DomainError("CrfModel: a must be nonzero")
        if self.gain_scale <= 0:
            raise DomainError("CrfModel: gain_scale must be positive")


@dataclass
class ManifestRecord:
    degraded_path: str
    clean_path: str
    exposure: float
    split: str          # "train" | "test"


@dataclass
class DatasetManifest:
    records: list
    seed: int

    def split(self, which: str) -> list:
        return [r for r in self.records if r.split == which]


def lecarm_apply(img: np.ndarray, exposure: float, crf: CrfModel = None) -> np.ndarray:
    """Apply the tone map at exposure E to an image in [0,1].

    E=0 is the exact identity; the map is strictly increasing in pixel value
    for any exposure, and the output is clipped back to [0,1].
    """
    crf = crf or CrfModel()
    img = np.asarray(img, dtype=np.float64)
    if np.any(img < 0) or np.any(img > 1):
        raise DomainError("lecarm_apply: input values must lie in [0,1]")
    k = crf.gain_scale ** float(exposure)
    ka = k ** crf.a
    gain = np.exp(crf.b * (1.0 - ka))
    # 0^ka is 0 for ka>0; numpy already returns 0.0 there, no special case
    out = gain * np.power(img, ka)
    return np.clip(out, 0.0, 1.0)


def write_manifest(manifest: DatasetManifest, path):
    lines = [f"{r.degraded_path}\t{r.clean_path}\t{r.exposure:.6f}\t{r.split}"
             for r in manifest.records]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path, seed: int = 0) -> DatasetManifest:
    records = []
    text = Path(path).read_text()
    for ln, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4 or parts[3] not in ("train", "test"):
            raise InputError(f"{path}:{ln}: malformed manifest record")
        records.append(ManifestRecord(parts[0], parts[1], float(parts[2]), parts[3]))
    return DatasetManifest(records=records, seed=seed)


def _sample_exposure(rng) -> float:
    while True:
        e = rng.uniform(-1.0, 1.0)
        if abs(e) >= MIN_ABS_EXPOSURE:
            return e


def build_dataset(src_dir, out_dir, n_pairs: int, train_frac: float, seed: int,
                  crf: CrfModel = None) -> DatasetManifest:
    """Write n_pairs degraded/clean image pairs plus manifest.txt under out_dir.

    Sources are cycled in sorted order; exposures are uniform on (-1,1) with
    the near-identity band resampled. The split is a seeded shuffle with
    |train| = round(n_pairs * train_frac).
    """
    crf = crf or CrfModel()
    if n_pairs < 1:
        raise InputError(f"n_pairs must be >= 1, got {n_pairs}")
    if not 0.0 <= train_frac <= 1.0:
        raise InputError(f"train_frac must be in [0,1], got {train_frac}")
    sources = list_images(src_dir)
    if not sources:
        raise InputError(f"no readable images in {src_dir}")

    out = Path(out_dir)
    (out / "degraded").mkdir(parents=True, exist_ok=True)
    (out / "clean").mkdir(parents=True, exist_ok=True)

    rng = substream(seed, "synth")
    n_train = int(round(n_pairs * train_frac))
    splits = ["train"] * n_train + ["test"] * (n_pairs - n_train)
    order = rng.permutation(n_pairs)

    records = []
    for i in range(n_pairs):
        src = sources[i % len(sources)]
        exposure = _sample_exposure(rng)
        clean = read_image(src)
        degraded = lecarm_apply(clean, exposure, crf)
        name = f"pair{i:05d}.png"
        deg_path = out / "degraded" / name
        clean_path = out / "clean" / name
        write_image(deg_path, degraded)
        # re-encode the clean copy so both files are normalized 8-bit RGB PNG
        write_image(clean_path, clean)
        records.append(ManifestRecord(str(deg_path), str(clean_path),
                                      exposure, splits[order[i]]))

    manifest = DatasetManifest(records=records, seed=seed)
    write_manifest(manifest, out / "manifest.txt")
    return manifest


def write_demo_sources(directory, n: int, hw: int, seed: int):
    """Generate small smooth RGB test images (ramps + blobs) for demos/tests."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rng = substream(seed, "synth")
    yy, xx = np.mgrid[0:hw, 0:hw] / max(hw - 1, 1)
    paths = []
    for i in range(n):
        img = np.empty((3, hw, hw))
        for c in range(3):
            cx, cy = rng.uniform(0.2, 0.8, 2)
            sigma = rng.uniform(0.15, 0.4)
            blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma ** 2))
            ramp = rng.uniform(0.1, 0.9) * (rng.uniform() * xx + rng.uniform() * yy)
            img[c] = 0.15 + 0.5 * blob + 0.35 * ramp
        img = np.clip(img / max(img.max(), 1.0), 0.02, 0.98)
        p = d / f"src{i:03d}.png"
        write_image(p, img)
        paths.append(p)
    return paths
