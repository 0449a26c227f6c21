"""Clustered synthetic data with a per-instance shortcut code, and its augmentations.

Every sample lives in an intrinsic space of ``latent_dim + shortcut_dim``
coordinates that a fixed random orthogonal basis embeds into ``ambient_dim``:

* semantic (latent) coordinates: a class center on the unit sphere plus
  isotropic Gaussian noise of scale ``within_class_sigma``;
* shortcut coordinates: a random code unique to the instance, carrying no
  class information.

Weak augmentation leaves the shortcut code intact across views, so instance
discrimination can be solved without learning the classes.  Resampling the
shortcut coordinates removes that path.

Seeds are split with ``numpy.random.SeedSequence([seed, stream])``: stream 0
draws the class centers and basis, stream 1 the train split, stream 2 the
validation split.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

STREAM_LAYOUT, STREAM_TRAIN, STREAM_VAL = 0, 1, 2
MAX_CENTER_ATTEMPTS = 1000
JITTER_CLIP = 3.0  # jitter noise is clipped to +-3 sigma per coordinate


def stream_rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, stream)]))


@dataclass(frozen=True)
class DatasetSpec:
    n_classes: int = 10
    n_per_class: int = 100
    val_per_class: int = 50
    latent_dim: int = 8
    ambient_dim: int = 32
    shortcut_dim: int = 8
    within_class_sigma: float = 0.05
    shortcut_scale: float = 1.0
    min_center_angle: float = 50.0  # degrees
    seed: int = 0

    def errors(self) -> list[str]:
        errs = []
        if self.n_classes < 2:
            errs.append("n_classes must be >= 2")
        if self.n_per_class < 1 or self.val_per_class < 1:
            errs.append("n_per_class and val_per_class must be >= 1")
        if self.latent_dim < 2:
            errs.append("latent_dim must be >= 2")
        if self.shortcut_dim < 0:
            errs.append("shortcut_dim must be >= 0")
        if self.ambient_dim < self.latent_dim + self.shortcut_dim:
            errs.append("ambient_dim must be >= latent_dim + shortcut_dim")
        if not self.within_class_sigma > 0:
            errs.append("within_class_sigma must be > 0")
        if self.shortcut_scale < 0:
            errs.append("shortcut_scale must be >= 0")
        if not 0 <= self.min_center_angle < 180:
            errs.append("min_center_angle must be in [0, 180)")
        return errs


@dataclass(frozen=True)
class AugSpec:
    jitter_sigma: float = 0.0
    shortcut_resample_p: float = 0.0
    scale_lo: float = 1.0
    scale_hi: float = 1.0
    mask_p: float = 0.0  # stand-in for blur: zeroes intrinsic coordinates

    def errors(self) -> list[str]:
        errs = []
        if self.jitter_sigma < 0:
            errs.append("jitter_sigma must be >= 0")
        for name in ("shortcut_resample_p", "mask_p"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                errs.append(f"{name} must be in [0, 1]")
        if not 0 < self.scale_lo <= self.scale_hi:
            errs.append("scale range must satisfy 0 < scale_lo <= scale_hi")
        return errs

    def dominates(self, other: AugSpec) -> bool:
        """At least as strong as ``other`` in jitter, shortcut resampling and masking."""
        return (self.jitter_sigma >= other.jitter_sigma
                and self.shortcut_resample_p >= other.shortcut_resample_p
                and self.mask_p >= other.mask_p)


AUG_PRESETS: dict[str, AugSpec] = {
    "identity": AugSpec(),
    "baseline": AugSpec(jitter_sigma=0.08, shortcut_resample_p=0.01, scale_lo=0.8, scale_hi=1.2, mask_p=0.0),
    "aug-mid": AugSpec(jitter_sigma=0.08, shortcut_resample_p=0.3, scale_lo=0.8, scale_hi=1.2, mask_p=0.01),
    "aug+": AugSpec(jitter_sigma=0.1, shortcut_resample_p=0.9, scale_lo=0.8, scale_hi=1.2, mask_p=0.02),
    # deliberately too strong: breaks label preservation, for the exploratory sweep only
    "aug++": AugSpec(jitter_sigma=0.3, shortcut_resample_p=1.0, scale_lo=0.5, scale_hi=1.5, mask_p=0.1),
}


def aug_preset(name: str) -> AugSpec:
    try:
        return AUG_PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown augmentation preset {name!r}; known: {sorted(AUG_PRESETS)}") from None


def aug_id(aug: AugSpec) -> str:
    """Stable text identifier, e.g. for manifests."""
    for name, preset in AUG_PRESETS.items():
        if preset == aug:
            return name
    return "custom:" + ",".join(f"{f.name}={getattr(aug, f.name)!r}" for f in fields(aug))


@dataclass(frozen=True)
class Layout:
    basis: np.ndarray  # (ambient_dim, latent_dim + shortcut_dim), orthonormal columns
    centers: np.ndarray  # (n_classes, latent_dim), unit rows
    latent_dim: int
    shortcut_dim: int
    shortcut_scale: float

    def intrinsic(self, x: np.ndarray) -> np.ndarray:
        return x @ self.basis

    def draw_shortcut(self, rng: np.random.Generator, shape) -> np.ndarray:
        if self.shortcut_dim == 0:
            return np.zeros(shape)
        return rng.normal(0.0, self.shortcut_scale / np.sqrt(self.shortcut_dim), size=shape)


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    label: int
    instance_id: int


@dataclass(frozen=True)
class Dataset:
    spec: DatasetSpec
    split: str
    features: np.ndarray  # (n, ambient_dim)
    labels: np.ndarray  # (n,) int64
    instance_ids: np.ndarray  # (n,) int64
    layout: Layout

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return self.spec.n_classes

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def sample(self, i: int) -> Sample:
        return Sample(self.features[i], int(self.labels[i]), int(self.instance_ids[i]))


def _draw_centers(spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    max_cos = np.cos(np.deg2rad(spec.min_center_angle))
    for _ in range(MAX_CENTER_ATTEMPTS):
        c = rng.normal(size=(spec.n_classes, spec.latent_dim))
        c /= np.linalg.norm(c, axis=1, keepdims=True)
        cos = c @ c.T
        np.fill_diagonal(cos, -1.0)
        if cos.max() <= max_cos:
            return c
    raise ValueError(
        f"could not place {spec.n_classes} centers in {spec.latent_dim} dims with pairwise angle "
        f">= {spec.min_center_angle} degrees after {MAX_CENTER_ATTEMPTS} attempts"
    )


def make_layout(spec: DatasetSpec) -> Layout:
    errs = spec.errors()
    if errs:
        raise ValueError("invalid DatasetSpec: " + "; ".join(errs))
    rng = stream_rng(spec.seed, STREAM_LAYOUT)
    centers = _draw_centers(spec, rng)
    q, r = np.linalg.qr(rng.normal(size=(spec.ambient_dim, spec.ambient_dim)))
    q *= np.sign(np.diag(r))
    basis = q[:, : spec.latent_dim + spec.shortcut_dim].copy()
    return Layout(basis, centers, spec.latent_dim, spec.shortcut_dim, spec.shortcut_scale)


def generate(spec: DatasetSpec, split: str = "train") -> Dataset:
    """Draw the ``train`` or ``val`` split; both share centers and basis."""
    if split not in ("train", "val"):
        raise ValueError(f"split must be 'train' or 'val', got {split!r}")
    layout = make_layout(spec)
    per_class = spec.n_per_class if split == "train" else spec.val_per_class
    rng = stream_rng(spec.seed, STREAM_TRAIN if split == "train" else STREAM_VAL)
    labels = np.repeat(np.arange(spec.n_classes, dtype=np.int64), per_class)
    latent = layout.centers[labels] + rng.normal(0.0, spec.within_class_sigma, size=(len(labels), spec.latent_dim))
    shortcut = layout.draw_shortcut(rng, (len(labels), spec.shortcut_dim))
    features = np.hstack([latent, shortcut]) @ layout.basis.T
    offset = 0 if split == "train" else spec.n_classes * spec.n_per_class
    ids = np.arange(offset, offset + len(labels), dtype=np.int64)
    return Dataset(spec, split, features, labels, ids, layout)


def augment_batch(x: np.ndarray, aug: AugSpec, rng: np.random.Generator, layout: Layout) -> np.ndarray:
    """Augment each row of ``x`` independently.

    The draws happen in a fixed order regardless of which knobs are zero, so a
    given rng state always consumes the same amount of randomness:
    jitter, scale, resample mask, resample values, zero mask.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    L, S = layout.latent_dim, layout.shortcut_dim
    coords = layout.intrinsic(x)
    jitter = np.clip(rng.normal(size=(n, L)), -JITTER_CLIP, JITTER_CLIP) * aug.jitter_sigma
    scale = rng.uniform(aug.scale_lo, aug.scale_hi, size=(n, 1))
    resample = rng.random((n, S)) < aug.shortcut_resample_p
    fresh = layout.draw_shortcut(rng, (n, S))
    zero = rng.random((n, L + S)) < aug.mask_p

    new = coords.copy()
    new[:, :L] = (coords[:, :L] + jitter) * scale
    new[:, L:] = np.where(resample, fresh, coords[:, L:])
    new[zero] = 0.0
    # adding the embedded delta keeps the identity augmentation bit-exact
    return x + (new - coords) @ layout.basis.T


def augment(x: Sample | np.ndarray, aug: AugSpec, rng: np.random.Generator, layout: Layout) -> np.ndarray:
    features = x.features if isinstance(x, Sample) else x
    return augment_batch(features[None, :], aug, rng, layout)[0]


def positive_pair(x: Sample | np.ndarray, aug: AugSpec, rng: np.random.Generator,
                  layout: Layout) -> tuple[np.ndarray, np.ndarray]:
    return augment(x, aug, rng, layout), augment(x, aug, rng, layout)


def positive_pairs(x: np.ndarray, aug: AugSpec, rng: np.random.Generator,
                   layout: Layout) -> tuple[np.ndarray, np.ndarray]:
    """Two independent views of every row of ``x``."""
    return augment_batch(x, aug, rng, layout), augment_batch(x, aug, rng, layout)


def nearest_center(x: np.ndarray, layout: Layout) -> np.ndarray:
    """Nearest clean class center by cosine in latent coordinates."""
    latent = layout.intrinsic(np.atleast_2d(x))[:, : layout.latent_dim]
    return np.argmax(latent @ layout.centers.T, axis=1)
