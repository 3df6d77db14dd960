"""Synthetic tasks with a known content/style factorisation.

* ``gen_xor``: x ~ U(-1, 1)^3, y = (x0 > 0) xor (x1 > 0) xor (x2 > 0).
* ``gen_multidomain``: small images whose class is the position of a blob
  (the content) rendered through a per-domain affine colour map (the style).
  The content distribution is identical in every domain; only the style
  differs, and styles are invertible, so the ground-truth translation of an
  example into another domain is known exactly.

On-disk layout (``save``/``load``): ``manifest.txt`` holds ``key = value``
metadata; ``data.bin`` holds every example contiguously as little-endian
float64 values ``x[0..D-1], y, d`` (row-major, D = x_dim).
"""

from __future__ import annotations

import warnings as _warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import configio
from .errors import ContractError, VdnError

DATA_SCHEMA_VERSION = 1
MANIFEST = "manifest.txt"
BLOB = "data.bin"


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    d: np.ndarray
    n_classes: int
    n_domains: int
    task: str = "custom"
    image_shape: tuple[int, ...] | None = None
    factors: dict = field(default_factory=dict, repr=False)
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.d = np.asarray(self.d, dtype=np.int64)
        if not (len(self.x) == len(self.y) == len(self.d)):
            raise ContractError("x, y, d lengths differ")
        if len(self.y) and (self.y.max() >= self.n_classes or self.d.max() >= self.n_domains):
            raise ContractError("label or domain index out of range")
        if not np.all(np.isfinite(self.x)):
            raise ContractError("non-finite features")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def x_dim(self) -> int:
        return self.x.shape[1]

    def subset(self, mask) -> "Dataset":
        mask = np.asarray(mask)
        return Dataset(
            self.x[mask], self.y[mask], self.d[mask], self.n_classes, self.n_domains,
            self.task, self.image_shape,
            {k: v[mask] for k, v in self.factors.items()}, list(self.warnings),
        )

    def domains(self) -> list[int]:
        return sorted(int(v) for v in np.unique(self.d))

    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        rows = np.concatenate([self.x, self.y[:, None], self.d[:, None]], axis=1)
        (path / BLOB).write_bytes(np.ascontiguousarray(rows, dtype="<f8").tobytes())
        meta = {
            "schema_version": DATA_SCHEMA_VERSION,
            "task": self.task,
            "count": len(self),
            "x_dim": self.x_dim,
            "image_shape": self.image_shape,
            "n_classes": self.n_classes,
            "n_domains": self.n_domains,
            "class_vocab": list(range(self.n_classes)),
            "domain_vocab": list(range(self.n_domains)),
            "warnings": self.warnings or None,
            "layout": "little-endian f64 row-major; per example x[0..x_dim-1] then y then d",
        }
        text = "".join(f"{k} = {configio.format_value(v)}\n" for k, v in meta.items())
        (path / MANIFEST).write_text(text)

    @classmethod
    def load(cls, path) -> "Dataset":
        path = Path(path)
        try:
            meta = configio.read_file(path / MANIFEST)
            count, x_dim = int(meta["count"]), int(meta["x_dim"])
            n_classes, n_domains = int(meta["n_classes"]), int(meta["n_domains"])
        except (OSError, KeyError, ValueError) as exc:
            raise VdnError(f"cannot read dataset manifest in {path}: {exc}") from None
        raw = (path / BLOB).read_bytes()
        width = x_dim + 2
        if len(raw) != 8 * count * width:
            raise VdnError(f"{path / BLOB}: expected {8 * count * width} bytes, found {len(raw)}")
        rows = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(count, width)
        shape = meta.get("image_shape", "none")
        image_shape = None if shape == "none" else tuple(int(s) for s in shape.split(","))
        warn = meta.get("warnings", "none")
        return cls(
            rows[:, :x_dim], rows[:, x_dim].astype(np.int64), rows[:, x_dim + 1].astype(np.int64),
            n_classes, n_domains, meta.get("task", "custom"), image_shape,
            warnings=[] if warn == "none" else warn.split(","),
        )


# -- XOR ----------------------------------------------------------------------------

def xor_label(x) -> np.ndarray:
    x = np.asarray(x)
    return np.bitwise_xor.reduce((x > 0).astype(np.int64), axis=-1)


def gen_xor(n: int, rng: np.random.Generator) -> Dataset:
    if n < 1:
        raise ContractError("gen_xor needs n >= 1")
    x = rng.uniform(-1.0, 1.0, size=(n, 3))
    return Dataset(x, xor_label(x), np.zeros(n, dtype=np.int64), 2, 1, task="xor")


# -- multi-domain images ----------------------------------------------------------------

@dataclass
class DomainSpec:
    """Per-domain affine colour styles and the shared per-class content layout.

    Pixel value in channel c of domain d: ``gains[d, c] * m ** gammas[d] + offsets[d, c]``
    for a content intensity m in [0, 1].  |gain| + |offset| <= 1 keeps pixels in [-1, 1].
    """

    gains: np.ndarray
    offsets: np.ndarray
    gammas: np.ndarray | None = None   # contrast curve per domain; default linear
    n_classes: int = 4
    size: int = 12
    blob_radius: tuple[float, float] = (1.2, 2.0)
    anchor_radius: float = 3.2
    jitter: float = 0.8
    content_noise: float = 0.05

    def __post_init__(self):
        self.gains = np.asarray(self.gains, dtype=np.float64)
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        if self.gammas is None:
            self.gammas = np.ones(len(self.gains))
        self.gammas = np.asarray(self.gammas, dtype=np.float64)
        if self.gammas.shape != (len(self.gains),) or np.any(self.gammas <= 0):
            raise ContractError("gammas must be positive, one per domain")
        if self.gains.shape != self.offsets.shape or self.gains.ndim != 2:
            raise ContractError("gains and offsets must both be (n_domains, channels)")
        if np.any(self.gains == 0):
            raise ContractError("zero gain makes a style non-invertible")
        if np.any(np.abs(self.gains) + np.abs(self.offsets) > 1.0 + 1e-12):
            raise ContractError("|gain| + |offset| must not exceed 1")

    @property
    def n_domains(self) -> int:
        return self.gains.shape[0]

    @property
    def channels(self) -> int:
        return self.gains.shape[1]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.size, self.size, self.channels)

    def class_anchors(self) -> np.ndarray:
        """Blob centre per class, evenly spaced on a circle (quadrant diagonals for 4)."""
        c = (self.size - 1) / 2.0
        ang = 2 * np.pi * np.arange(self.n_classes) / self.n_classes + np.pi / 4
        return np.stack([c + self.anchor_radius * np.cos(ang), c + self.anchor_radius * np.sin(ang)], 1)

    def is_degenerate(self, tol: float = 1e-3) -> bool:
        flat = np.concatenate([self.gains, self.offsets, self.gammas[:, None]], axis=1)
        for i in range(len(flat)):
            for j in range(i + 1, len(flat)):
                if np.max(np.abs(flat[i] - flat[j])) < tol:
                    return True
        return False

    @classmethod
    def random(cls, n_domains: int = 4, n_classes: int = 4, seed: int = 0,
               channels: int = 3, inversions: bool = True, max_gamma: float = 2.0,
               **kwargs) -> "DomainSpec":
        """Random styles; ``inversions=False`` keeps every gain positive."""
        rng = np.random.default_rng(seed)
        mag = rng.uniform(0.3, 0.9, size=(n_domains, channels))
        signs = rng.choice([-1.0, 1.0], size=(n_domains, channels))
        gains = mag * (signs if inversions else 1.0)
        room = 1.0 - mag
        offsets = rng.uniform(-1.0, 1.0, size=(n_domains, channels)) * room
        gammas = np.exp(rng.uniform(-np.log(max_gamma), np.log(max_gamma), size=n_domains))
        return cls(gains, offsets, gammas, n_classes=n_classes, **kwargs)


def render_content(spec: DomainSpec, centers, radii, intensity, noise) -> np.ndarray:
    """Grey-level content maps m in [0, 1], shape (n, size, size)."""
    grid = np.arange(spec.size, dtype=np.float64)
    du = grid[None, :, None] - centers[:, 0][:, None, None]
    dv = grid[None, None, :] - centers[:, 1][:, None, None]
    blob = intensity[:, None, None] * np.exp(-(du ** 2 + dv ** 2) / (2 * radii[:, None, None] ** 2))
    return np.clip(blob + noise, 0.0, 1.0)


def apply_style(spec: DomainSpec, content, domains) -> np.ndarray:
    """Flattened (n, size*size*channels) pixels of content maps in the given domains."""
    domains = np.asarray(domains)
    g = spec.gains[domains][:, None, None, :]
    o = spec.offsets[domains][:, None, None, :]
    gamma = spec.gammas[domains][:, None, None, None]
    img = g * np.asarray(content)[..., None] ** gamma + o
    return img.reshape(len(domains), -1)


def invert_style(spec: DomainSpec, x, domains) -> np.ndarray:
    """Recover the content maps from pixels (every channel agrees; channel 0 is returned)."""
    domains = np.asarray(domains)
    img = np.asarray(x).reshape(len(domains), spec.size, spec.size, spec.channels)
    m = (img - spec.offsets[domains][:, None, None, :]) / spec.gains[domains][:, None, None, :]
    m = np.clip(m[..., 0], 0.0, 1.0)
    return m ** (1.0 / spec.gammas[domains][:, None, None])


def restyle(spec: DomainSpec, x, from_domains, to_domains) -> np.ndarray:
    """Ground-truth translation of examples into other domains."""
    return apply_style(spec, invert_style(spec, x, from_domains), to_domains)


def sample_content(spec: DomainSpec, y, rng: np.random.Generator) -> dict:
    n = len(y)
    anchors = spec.class_anchors()
    centers = anchors[y] + rng.uniform(-spec.jitter, spec.jitter, size=(n, 2))
    radii = rng.uniform(*spec.blob_radius, size=n)
    intensity = rng.uniform(0.7, 1.0, size=n)
    noise = spec.content_noise * rng.standard_normal((n, spec.size, spec.size))
    content = render_content(spec, centers, radii, intensity, noise)
    return {"center_u": centers[:, 0], "center_v": centers[:, 1], "radius": radii,
            "intensity": intensity, "content": content}


def gen_multidomain(spec: DomainSpec, n_per_domain: int, rng: np.random.Generator) -> Dataset:
    if spec.n_domains < 3 or spec.n_classes < 2:
        raise ContractError("need at least 3 domains and 2 classes")
    if n_per_domain < 1:
        raise ContractError("n_per_domain must be >= 1")
    xs, ys, ds, facs = [], [], [], []
    for dom in range(spec.n_domains):
        # class-balanced labels; content is drawn from the same law in every domain
        y = np.arange(n_per_domain) % spec.n_classes
        rng.shuffle(y)
        fac = sample_content(spec, y, rng)
        xs.append(apply_style(spec, fac["content"], np.full(n_per_domain, dom)))
        ys.append(y)
        ds.append(np.full(n_per_domain, dom))
        facs.append(fac)
    factors = {k: np.concatenate([f[k] for f in facs]) for k in facs[0]}
    flags = []
    if spec.is_degenerate():
        flags.append("degenerate_styles")
        _warnings.warn("domain styles are (nearly) identical", stacklevel=2)
    return Dataset(
        np.concatenate(xs), np.concatenate(ys), np.concatenate(ds),
        spec.n_classes, spec.n_domains, task="multidomain",
        image_shape=spec.image_shape, factors=factors, warnings=flags,
    )


def lodo_split(ds: Dataset, held_out_domain: int) -> tuple[Dataset, Dataset]:
    """Leave-one-domain-out: every example of ``held_out_domain`` goes to test."""
    if held_out_domain not in ds.domains():
        raise ContractError(f"domain {held_out_domain} not present (have {ds.domains()})")
    mask = ds.d == held_out_domain
    return ds.subset(~mask), ds.subset(mask)
