"""Synthetic multi-site tumour volumes: nested ellipsoids with four contrasts."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from m4fuse.io import read_volume, write_volume

# per-modality mean intensity of (background, edema, necrotic core, enhancing rim)
DEFAULT_PROFILES = (
    (0.0, 1.0, 0.4, 0.6),   # FLAIR-like: edema bright
    (0.0, 0.3, 0.2, 1.6),   # T1ce-like: enhancing rim bright
    (0.0, 0.6, 1.2, 0.4),   # T2-like: core bright
    (0.0, -0.4, -0.8, 0.8),
)


@dataclass
class SyntheticSpec:
    shape: tuple[int, int, int] = (32, 32, 32)
    count: int = 32
    seed: int = 0
    wt_radius: tuple[float, float] = (7.0, 11.0)
    tc_fraction: float = 0.6
    et_thickness: float = 2.0
    profiles: tuple = DEFAULT_PROFILES
    noise: float = 1.0
    sites: tuple[str, ...] = ("site_a", "site_b")
    site_shift: tuple[float, ...] = (-0.5, 0.5)

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.wt_radius = tuple(float(r) for r in self.wt_radius)
        self.profiles = tuple(tuple(float(v) for v in p) for p in self.profiles)
        self.sites = tuple(self.sites)
        self.site_shift = tuple(float(s) for s in self.site_shift)


def _ellipsoid_distance(grid, centre, radii, rotation):
    offset = np.stack([g - c for g, c in zip(grid, centre)], axis=-1) @ rotation
    return np.sqrt(((offset / radii) ** 2).sum(axis=-1))


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    return q * np.sign(np.diag(r))


def make_sample(spec: SyntheticSpec, rng: np.random.Generator, site_index: int):
    """Return (image (4, D, H, W) float32, labels (D, H, W) in {0, 1, 2, 4})."""
    shape = np.array(spec.shape)
    grid = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij")
    lo, hi = spec.wt_radius
    radii = rng.uniform(lo, hi, size=3)
    margin = radii.max() + 1
    centre = np.array([rng.uniform(min(margin, s / 2), max(s - margin, s / 2)) for s in shape])
    rot = _random_rotation(rng)

    r_wt = _ellipsoid_distance(grid, centre, radii, rot)
    tc_radii = radii * spec.tc_fraction
    r_tc = _ellipsoid_distance(grid, centre + rng.normal(scale=0.5, size=3), tc_radii, rot)
    inner = np.maximum(tc_radii - spec.et_thickness, 0.5)
    r_core = _ellipsoid_distance(grid, centre, inner, rot)

    wt = r_wt <= 1.0
    tc = wt & (r_tc <= 1.0)
    et = tc & (r_core > 1.0)
    labels = np.zeros(tuple(shape), dtype=np.int64)
    labels[wt] = 2
    labels[tc] = 1
    labels[et] = 4

    region = np.select([et, tc, wt], [3, 2, 1], default=0)
    profiles = np.asarray(spec.profiles, dtype=np.float64)
    shift = spec.site_shift[site_index] if spec.site_shift else 0.0
    image = profiles[:, region] + shift
    image += rng.normal(scale=spec.noise, size=image.shape)
    return image.astype(np.float32), labels


def generate(spec: SyntheticSpec) -> list[dict]:
    """In-memory dataset: dicts with ``image``, ``labels`` and ``site``."""
    rng = np.random.default_rng(spec.seed)
    samples = []
    for i in range(spec.count):
        site_index = i % len(spec.sites)
        image, labels = make_sample(spec, rng, site_index)
        samples.append({"image": image, "labels": labels, "site": spec.sites[site_index]})
    return samples


def gen_synthetic(spec: SyntheticSpec, out_dir: str | Path) -> Path:
    """Write ``NNNN_image.m4fv`` / ``NNNN_label.m4fv`` pairs and ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, sample in enumerate(generate(spec)):
        img_name, lab_name = f"{i:04d}_image.m4fv", f"{i:04d}_label.m4fv"
        write_volume(out / img_name, sample["image"][None])
        write_volume(out / lab_name, sample["labels"][None, None].astype(np.float32))
        entries.append({"image": img_name, "label": lab_name, "dataset_id": sample["site"]})
    manifest = {"spec": asdict(spec), "samples": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out / "manifest.json"


def load_dataset(directory: str | Path) -> list[dict]:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except OSError as exc:
        raise OSError(f"cannot read manifest in {directory}: {exc}") from exc
    samples = []
    for entry in manifest["samples"]:
        image = read_volume(directory / entry["image"])[0]
        labels = read_volume(directory / entry["label"])[0, 0].astype(np.int64)
        samples.append({"image": image, "labels": labels, "site": entry["dataset_id"]})
    return samples
