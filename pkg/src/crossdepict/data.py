"""Multi-domain labelled datasets, the procedural shape/style generator, and splits.

A dataset stores, per domain, an ``(n, D)`` float64 feature matrix and an
``(n,)`` label vector. Classes are shared by every domain. Scenarios hold one
domain out entirely and split the rest 9:1 into train and validation.
"""

from __future__ import annotations

import logging
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

PROTOTYPES = ("cross", "square", "diagonal", "tee", "ell", "disc", "chevron")
STYLES = ("photo", "art", "cartoon", "sketch")
MANIFEST_VERSION = 1


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Example:
    features: np.ndarray
    label: int
    domain: str


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    domains: tuple = ()

    def __len__(self):
        return len(self.y)


@dataclass
class MultiDomainDataset:
    classes: tuple
    features: dict  # domain id -> (n, D) array
    labels: dict  # domain id -> (n,) int array
    name: str = "dataset"

    def __post_init__(self):
        self.classes = tuple(self.classes)
        if set(self.features) != set(self.labels):
            raise DataError("feature and label domains differ")
        dims = {f.shape[1] for f in self.features.values()}
        if len(dims) > 1:
            raise DataError(f"domains disagree on feature dimension: {sorted(dims)}")
        for d in self.features:
            f = np.asarray(self.features[d], dtype=np.float64)
            y = np.asarray(self.labels[d], dtype=np.int64)
            if f.ndim != 2 or y.shape != (f.shape[0],):
                raise DataError(f"domain {d!r}: features {f.shape} vs labels {y.shape}")
            if y.size and (y.min() < 0 or y.max() >= len(self.classes)):
                raise DataError(f"domain {d!r}: label outside [0, {len(self.classes)})")
            if not np.all(np.isfinite(f)):
                raise DataError(f"domain {d!r}: non-finite features")
            f.flags.writeable = False
            y.flags.writeable = False
            self.features[d], self.labels[d] = f, y

    @property
    def domains(self) -> tuple:
        return tuple(self.features)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def dim(self) -> int:
        return next(iter(self.features.values())).shape[1]

    def size(self, domain: Optional[str] = None) -> int:
        if domain is None:
            return sum(len(y) for y in self.labels.values())
        return len(self.labels[domain])

    def examples(self, domain: str) -> list[Example]:
        f, y = self.features[domain], self.labels[domain]
        return [Example(f[i], int(y[i]), domain) for i in range(len(y))]

    def class_counts(self, domain: str) -> dict:
        c = Counter(self.labels[domain].tolist())
        return {name: c.get(i, 0) for i, name in enumerate(self.classes)}

    def missing_classes(self) -> dict:
        out = {}
        for d in self.domains:
            miss = [k for k, n in self.class_counts(d).items() if n == 0]
            if miss:
                out[d] = miss
        return out

    def equals(self, other: "MultiDomainDataset") -> bool:
        return (self.classes == other.classes and self.domains == other.domains
                and all(np.array_equal(self.features[d], other.features[d])
                        and np.array_equal(self.labels[d], other.labels[d]) for d in self.domains))


# ---------------------------------------------------------------------------
# procedural generator


@dataclass(frozen=True)
class SyntheticConfig:
    n_classes: int = 7
    domains: tuple = STYLES
    per_class: int = 300
    side: int = 16
    noise: float = 0.15
    max_shift: int = 2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "domains", tuple(self.domains))
        if not 2 <= self.n_classes <= len(PROTOTYPES):
            raise DataError(f"n_classes must be in [2, {len(PROTOTYPES)}], got {self.n_classes}")
        if self.side < 16:
            raise DataError(f"image side must be >= 16, got {self.side}")
        unknown = [d for d in self.domains if d not in STYLES]
        if unknown:
            raise DataError(f"unknown styles {unknown}; choose from {STYLES}")
        if self.per_class < 1 or self.noise < 0 or self.max_shift < 0:
            raise DataError("per_class must be >= 1, noise and max_shift >= 0")


def prototype_mask(name: str, side: int) -> np.ndarray:
    """Binary S x S shape, drawn in the central 60% so shifts stay inside the frame."""
    c = (np.arange(side) + 0.5) / side
    v, u = np.meshgrid(c, c, indexing="ij")  # v: row, u: column
    w = max(2, round(side / 8)) / side
    lo, hi = 0.2, 0.8
    box = (u >= lo) & (u <= hi) & (v >= lo) & (v <= hi)
    if name == "cross":
        m = box & ((np.abs(u - 0.5) < w / 2) | (np.abs(v - 0.5) < w / 2))
    elif name == "square":
        inner = (u >= lo + w) & (u <= hi - w) & (v >= lo + w) & (v <= hi - w)
        m = box & ~inner
    elif name == "diagonal":
        m = box & (np.abs(u - v) < 0.75 * w)
    elif name == "tee":
        m = box & ((v <= lo + w) | (np.abs(u - 0.5) < w / 2))
    elif name == "ell":
        m = box & ((u <= lo + w) | (v >= hi - w))
    elif name == "disc":
        m = (u - 0.5) ** 2 + (v - 0.5) ** 2 < 0.28 ** 2
    elif name == "chevron":
        m = box & (np.abs(v - (lo + 1.1 * np.abs(u - 0.5))) < 0.75 * w)
    else:
        raise DataError(f"unknown prototype {name!r}")
    return m


def _shift(mask: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(mask)
    S = mask.shape[0]
    ys, yd = (slice(0, S - dy), slice(dy, S)) if dy >= 0 else (slice(-dy, S), slice(0, S + dy))
    xs, xd = (slice(0, S - dx), slice(dx, S)) if dx >= 0 else (slice(-dx, S), slice(0, S + dx))
    out[yd, xd] = mask[ys, xs]
    return out


def _outline(mask: np.ndarray, thickness: int = 1) -> np.ndarray:
    inner = ndimage.binary_erosion(mask, iterations=thickness, border_value=0)
    return mask & ~inner


def _plane(rng: np.random.Generator, side: int) -> np.ndarray:
    """Random linear ramp over the image, values in [-0.5, 0.5]."""
    c = (np.arange(side) + 0.5) / side - 0.5
    v, u = np.meshgrid(c, c, indexing="ij")
    theta = rng.uniform(0, 2 * np.pi)
    return (np.cos(theta) * u + np.sin(theta) * v) * np.sqrt(0.5)


def render(mask: np.ndarray, style: str, noise: float, rng: np.random.Generator) -> np.ndarray:
    """Paint a shape mask in one depiction style.

    Without noise the nonzero pixels are exactly the mask; styles only change
    intensities inside it. Noise adds the style's texture: Gaussian grain for
    photo, a low-frequency background wash for art, a flat background patch
    for cartoon, and stroke jitter for sketch.
    """
    S = mask.shape[0]
    m = mask.astype(np.float64)
    if style == "photo":
        c = (np.arange(S) + 0.5) / S
        v, u = np.meshgrid(c, c, indexing="ij")
        shading = 0.55 + 0.45 * np.cos(np.pi * (0.6 * u + 0.4 * v - 0.3))
        img = m * shading
        if noise:
            img = img + rng.normal(0.0, noise, size=img.shape)
    elif style == "art":
        fill = rng.uniform(0.35, 1.0)
        ramp = 1.0 + rng.uniform(0.2, 0.6) * _plane(rng, S)
        img = m * fill * ramp
        if noise:
            wash = noise * 2.0 * (0.5 + _plane(rng, S)) * rng.uniform(0.3, 1.0)
            img = img + (1 - m) * wash
    elif style == "cartoon":
        edge = _outline(mask, 2)
        img = 0.5 * m + 0.3 * edge
        if noise:
            img = img + (1 - m) * rng.uniform(0.0, noise)
    elif style == "sketch":
        edge = _outline(mask, 1)
        if noise:
            p = min(0.5, noise)
            ys, xs = np.nonzero(edge)
            move = rng.random(ys.size) < p
            ys = np.clip(ys + move * rng.integers(-1, 2, ys.size), 0, S - 1)
            xs = np.clip(xs + move * rng.integers(-1, 2, xs.size), 0, S - 1)
            edge = np.zeros_like(edge)
            edge[ys, xs] = True
        interior = mask & ~_outline(mask, 1)
        img = 0.4 * interior + 1.0 * edge
    else:
        raise DataError(f"unknown style {style!r}")
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(config: SyntheticConfig = SyntheticConfig()) -> MultiDomainDataset:
    """Dataset whose class is a shape and whose domain is a rendering style."""
    classes = PROTOTYPES[: config.n_classes]
    masks = [prototype_mask(c, config.side) for c in classes]
    root = np.random.SeedSequence(config.seed)
    feats, labels = {}, {}
    for style, ss in zip(config.domains, root.spawn(len(config.domains))):
        rng = np.random.default_rng(ss)
        rows, ys = [], []
        for k, mask in enumerate(masks):
            for _ in range(config.per_class):
                if config.max_shift:
                    dy, dx = rng.integers(-config.max_shift, config.max_shift + 1, size=2)
                    shifted = _shift(mask, int(dy), int(dx))
                else:
                    shifted = mask
                rows.append(render(shifted, style, config.noise, rng).ravel())
                ys.append(k)
        order = rng.permutation(len(ys))
        feats[style] = np.asarray(rows)[order]
        labels[style] = np.asarray(ys, dtype=np.int64)[order]
    if len(set(config.domains)) != len(config.domains):
        raise DataError("duplicate domain styles")
    return MultiDomainDataset(classes, feats, labels, name=f"synthetic-seed{config.seed}")


# ---------------------------------------------------------------------------
# manifest files
#
# manifest (tab separated):
#   format  1
#   classes name1  name2 ...
#   domain  <id>   <data file relative to the manifest>
# data file: one row per example, "label_name,v1,...,vD"


def save_dataset(dataset: MultiDomainDataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"format\t{MANIFEST_VERSION}", "classes\t" + "\t".join(dataset.classes)]
    for d in dataset.domains:
        fname = f"{d}.csv"
        with open(directory / fname, "w") as fh:
            for row, y in zip(dataset.features[d], dataset.labels[d]):
                fh.write(dataset.classes[y] + "," + ",".join(repr(float(v)) for v in row) + "\n")
        lines.append(f"domain\t{d}\t{fname}")
    manifest = directory / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_dataset(manifest) -> MultiDomainDataset:
    """Read a manifest and its data files; features are rescaled into [0, 1] if needed."""
    manifest = Path(manifest)
    if not manifest.is_file():
        raise DataError(f"manifest not found: {manifest}")
    version, classes, entries = None, None, []
    for n, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if parts[0] == "format":
            version = int(parts[1])
        elif parts[0] == "classes":
            classes = tuple(parts[1:])
        elif parts[0] == "domain" and len(parts) == 3:
            entries.append((parts[1], parts[2]))
        else:
            raise DataError(f"{manifest}:{n}: unrecognised manifest line")
    if version != MANIFEST_VERSION:
        raise DataError(f"{manifest}: unsupported format version {version}")
    if not classes:
        raise DataError(f"{manifest}: no classes listed")
    index = {c: i for i, c in enumerate(classes)}
    feats, labels, dim = {}, {}, None
    for domain, rel in entries:
        path = manifest.parent / rel
        if not path.is_file():
            raise DataError(f"data file not found: {path}")
        rows, ys = [], []
        with open(path) as fh:
            for n, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                name, *vals = line.rstrip("\n").split(",")
                if name not in index:
                    raise DataError(f"{path}:{n}: unknown class {name!r}")
                if dim is None:
                    dim = len(vals)
                elif len(vals) != dim:
                    raise DataError(f"{path}:{n}: {len(vals)} features, expected {dim}")
                rows.append([float(v) for v in vals])
                ys.append(index[name])
        feats[domain] = np.asarray(rows, dtype=np.float64).reshape(len(rows), dim or 0)
        labels[domain] = np.asarray(ys, dtype=np.int64)
    lo = min((f.min() for f in feats.values() if f.size), default=0.0)
    hi = max((f.max() for f in feats.values() if f.size), default=1.0)
    if lo < 0.0 or hi > 1.0:
        span = hi - lo if hi > lo else 1.0
        feats = {d: (f - lo) / span for d, f in feats.items()}
    ds = MultiDomainDataset(classes, feats, labels, name=manifest.parent.name)
    missing = ds.missing_classes()
    if missing:
        warnings.warn(f"domains without examples of some classes: {missing}", stacklevel=2)
    return ds


# ---------------------------------------------------------------------------
# scenarios and sampling


def sample_batch(x: np.ndarray, y: np.ndarray, n_b: int, rng: np.random.Generator) -> Batch:
    """Uniform draw with replacement of ``n_b`` rows from the pool ``(x, y)``."""
    if n_b < 1:
        raise DataError(f"batch size must be >= 1, got {n_b}")
    if len(y) == 0:
        raise DataError("cannot sample from an empty pool")
    idx = rng.integers(0, len(y), size=n_b)
    return Batch(x[idx], y[idx])


def split_meta(domains: Sequence[str], rng: np.random.Generator, mode: str = "mldg"):
    """Meta-train / meta-test split of the training domains.

    ``mldg``: one domain uniformly chosen as meta-test, the rest meta-train.
    ``metareg``: an ordered pair ``(a, b)`` with ``a != b``, uniform over pairs.
    """
    domains = tuple(domains)
    if len(domains) < 2:
        raise DataError(f"meta split needs at least 2 training domains, got {len(domains)}")
    if mode == "mldg":
        j = int(rng.integers(len(domains)))
        return domains[:j] + domains[j + 1:], (domains[j],)
    if mode == "metareg":
        a = int(rng.integers(len(domains)))
        b = int(rng.integers(len(domains) - 1))
        b += b >= a
        return (domains[a],), (domains[b],)
    raise ValueError(f"unknown meta split mode {mode!r}")


def _val_counts(per_class: dict, total: int) -> dict:
    """Per-class validation quota summing to floor(total / 10).

    Each class first gets floor(n_c / 10); the remainder goes to classes that
    still have none, then to the largest leftovers, keeping one training
    example per class whenever the totals allow it.
    """
    target = total // 10
    quota = {k: n // 10 for k, n in per_class.items()}
    short = target - sum(quota.values())
    order = sorted(per_class, key=lambda k: (quota[k] > 0, -(per_class[k] % 10), k))
    for keep in (1, 0):
        for k in order:
            if short <= 0:
                break
            if quota[k] < per_class[k] - keep:
                quota[k] += 1
                short -= 1
    return quota


class IsolationError(RuntimeError):
    pass


@dataclass
class ScenarioSplit:
    dataset: MultiDomainDataset
    held_out: str
    train_idx: dict
    val_idx: dict
    audit: Counter = field(default_factory=Counter)

    @property
    def train_domains(self) -> tuple:
        return tuple(self.train_idx)

    def pool(self, domains: Iterable[str], part: str = "train"):
        domains = tuple(domains)
        if self.held_out in domains:
            raise IsolationError(f"held-out domain {self.held_out!r} requested from the scenario")
        idx = self.train_idx if part == "train" else self.val_idx
        xs = [self.dataset.features[d][idx[d]] for d in domains]
        ys = [self.dataset.labels[d][idx[d]] for d in domains]
        return np.concatenate(xs), np.concatenate(ys)

    def sampler(self, domains: Iterable[str]):
        """Return ``draw(n_b, rng) -> Batch`` over the training part of ``domains``."""
        domains = tuple(domains)
        x, y = self.pool(domains)
        dom = np.concatenate([np.full(len(self.train_idx[d]), i) for i, d in enumerate(domains)])

        rows_all = np.arange(len(y))

        def draw(n_b: int, rng: np.random.Generator) -> Batch:
            rows = sample_batch(rows_all, rows_all, n_b, rng).y
            for i in np.unique(dom[rows]):
                self.audit[domains[i]] += int(np.sum(dom[rows] == i))
            return Batch(x[rows], y[rows], tuple(domains[i] for i in dom[rows]))

        return draw

    def validation(self):
        return self.pool(self.train_domains, "val")

    def test(self):
        """All held-out examples; for deployment only, never sampled during training."""
        return self.dataset.features[self.held_out], self.dataset.labels[self.held_out]

    def check_isolation(self):
        if self.audit.get(self.held_out, 0):
            raise IsolationError(f"{self.audit[self.held_out]} held-out examples were sampled")


def make_scenario(dataset: MultiDomainDataset, held_out: str, seed: int) -> ScenarioSplit:
    """Leave ``held_out`` out; split every other domain 9:1, stratified by class."""
    if held_out not in dataset.domains:
        raise DataError(f"unknown held-out domain {held_out!r}")
    train_domains = [d for d in dataset.domains if d != held_out]
    if len(train_domains) < 2:
        raise DataError(f"need at least 2 training domains, got {len(train_domains)}")
    root = np.random.SeedSequence(seed)
    train_idx, val_idx = {}, {}
    for d, ss in zip(dataset.domains, root.spawn(len(dataset.domains))):
        if d == held_out:
            continue
        rng = np.random.default_rng(ss)
        y = dataset.labels[d]
        if len(y) == 0:
            raise DataError(f"training domain {d!r} is empty")
        perm = rng.permutation(len(y))
        per_class = {int(k): int(np.sum(y == k)) for k in np.unique(y)}
        quota = _val_counts(per_class, len(y))
        val = [i for i in perm if _take(quota, int(y[i]))]
        val_set = set(val)
        val_idx[d] = np.sort(np.asarray(val, dtype=np.int64))
        train_idx[d] = np.sort(np.asarray([i for i in perm if i not in val_set], dtype=np.int64))
    return ScenarioSplit(dataset, held_out, train_idx, val_idx)


def _take(quota: dict, k: int) -> bool:
    if quota.get(k, 0) > 0:
        quota[k] -= 1
        return True
    return False
