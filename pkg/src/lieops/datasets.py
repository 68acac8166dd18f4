"""Synthetic datasets: a swiss roll with neighbor-rank pair sampling, and a
class-structured manifold dataset for toy contrastive / semi-supervised runs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class PointPairBatch:
    """Paired points sampled nearby on a manifold."""

    sources: np.ndarray  # (n, d)
    targets: np.ndarray  # (n, d)

    def __post_init__(self):
        self.sources = np.asarray(self.sources, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.sources.shape != self.targets.shape:
            raise ValueError(
                f"sources shape {self.sources.shape} != targets shape {self.targets.shape}"
            )

    def __len__(self) -> int:
        return self.sources.shape[0]


@dataclass
class SwissRoll:
    points: np.ndarray  # (n, 3)
    turns: np.ndarray   # roll parameter t per point
    heights: np.ndarray


def swiss_roll(n: int, noise_sd: float = 0.0, seed: int = 0) -> SwissRoll:
    """Points (t cos t, h, t sin t) with t ~ U(1.5*pi, 4.5*pi), h ~ U(0, 21).

    Isotropic Gaussian noise of standard deviation ``noise_sd`` is added when
    positive. Bit-identical for a fixed seed.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    t = rng.uniform(1.5 * np.pi, 4.5 * np.pi, size=n)
    h = rng.uniform(0.0, 21.0, size=n)
    pts = np.stack([t * np.cos(t), h, t * np.sin(t)], axis=1)
    if noise_sd > 0.0:
        pts = pts + noise_sd * rng.normal(size=pts.shape)
    return SwissRoll(points=pts, turns=t, heights=h)


class NeighborTable:
    """Per-point neighbor indices for a contiguous rank window.

    Rank k means the k-th nearest other point under Euclidean distance
    (rank 1 = closest). Distance ties are broken by point index. The table is
    built once with brute-force sorts so pair sampling during training is a
    lookup.
    """

    def __init__(self, points: np.ndarray, k_lo: int, k_hi: int, chunk: int = 512):
        points = np.asarray(points, dtype=np.float64)
        n = points.shape[0]
        if not (1 <= k_lo < k_hi):
            raise ValueError("need 1 <= k_lo < k_hi")
        if k_hi >= n:
            raise ValueError(f"k_hi {k_hi} must be < number of points {n}")
        self.points = points
        self.k_lo = k_lo
        self.k_hi = k_hi
        table = np.empty((n, k_hi - k_lo + 1), dtype=np.int64)
        for start in range(0, n, chunk):
            block = points[start : start + chunk]
            d2 = np.sum((block[:, None, :] - points[None, :, :]) ** 2, axis=-1)
            # Force self to rank 0 even when duplicate points exist.
            rows = np.arange(block.shape[0])
            d2[rows, start + rows] = -1.0
            order = np.argsort(d2, axis=1, kind="stable")
            table[start : start + block.shape[0]] = order[:, k_lo : k_hi + 1]
        self.table = table

    def sample(self, batch_size: int, rng: np.random.Generator) -> PointPairBatch:
        """Anchors without replacement, partner rank uniform in [k_lo, k_hi]."""
        n = self.points.shape[0]
        anchors = rng.choice(n, size=min(batch_size, n), replace=False)
        ranks = rng.integers(0, self.table.shape[1], size=anchors.shape[0])
        partners = self.table[anchors, ranks]
        return PointPairBatch(self.points[anchors], self.points[partners])


def neighbor_pairs(
    points: np.ndarray, k_lo: int = 20, k_hi: int = 60, batch_size: int = 500, seed: int = 0
) -> PointPairBatch:
    """Sample anchor points and partners drawn from a neighbor-rank window."""
    table = NeighborTable(points, k_lo, k_hi)
    return table.sample(batch_size, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# Class-structured synthetic manifolds
# ---------------------------------------------------------------------------


@dataclass
class SynthClassDataset:
    """K classes, each a smooth embedding of a low-dimensional torus.

    Every class has its own integer frequency matrix, phases, linear map into
    ambient space, and center, so within-class variation follows a known
    smooth family while classes stay separated. ``latents`` holds the torus
    parameter of each point; positive pairs are re-embeddings of jittered
    latents of the same instance.
    """

    points: np.ndarray        # (n, ambient_dim)
    labels: np.ndarray        # (n,) int
    latents: np.ndarray       # (n, intrinsic_dim)
    freqs: np.ndarray         # (K, n_waves, intrinsic_dim) integer frequencies
    phases: np.ndarray        # (K, n_waves)
    maps: np.ndarray          # (K, ambient_dim, 2 * n_waves)
    centers: np.ndarray       # (K, ambient_dim)

    @property
    def n_classes(self) -> int:
        return self.centers.shape[0]

    @property
    def intrinsic_dim(self) -> int:
        return self.latents.shape[1]

    def embed(self, labels: np.ndarray, latents: np.ndarray) -> np.ndarray:
        """Map torus parameters to ambient points for the given classes."""
        labels = np.asarray(labels)
        latents = np.atleast_2d(np.asarray(latents, dtype=np.float64))
        angles = 2.0 * np.pi * np.einsum(
            "nwi,ni->nw", self.freqs[labels].astype(np.float64), latents
        ) + self.phases[labels]
        waves = np.concatenate([np.cos(angles), np.sin(angles)], axis=1)
        return np.einsum("ndw,nw->nd", self.maps[labels], waves) + self.centers[labels]

    def positive_pairs(
        self, idx: np.ndarray, jitter: float, rng: np.random.Generator
    ) -> PointPairBatch:
        """Two views of each selected instance from nearby torus parameters."""
        idx = np.asarray(idx)
        labels = self.labels[idx]
        base = self.latents[idx]
        u = base + jitter * rng.normal(size=base.shape)
        v = base + jitter * rng.normal(size=base.shape)
        return PointPairBatch(self.embed(labels, u), self.embed(labels, v))


def synth_class_manifolds(
    n_classes: int,
    per_class: int,
    ambient_dim: int,
    intrinsic_dim: int,
    seed: int = 0,
    n_waves: int = 4,
    center_spread: float = 6.0,
) -> SynthClassDataset:
    """Generate the class-manifold dataset.

    Each class embeds the ``intrinsic_dim``-torus through ``n_waves`` random
    integer-frequency sinusoids followed by a random linear map, then shifts
    by a class center. ``intrinsic_dim = 0`` collapses every class to its
    center point.
    """
    if intrinsic_dim > ambient_dim:
        raise ValueError("intrinsic_dim must be <= ambient_dim")
    if n_classes < 1 or per_class < 1 or intrinsic_dim < 0:
        raise ValueError("n_classes, per_class must be >= 1 and intrinsic_dim >= 0")
    rng = np.random.default_rng(seed)
    freqs = rng.integers(1, 3, size=(n_classes, n_waves, intrinsic_dim), endpoint=True)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(n_classes, n_waves))
    maps = rng.normal(size=(n_classes, ambient_dim, 2 * n_waves)) / np.sqrt(2.0 * n_waves)
    centers = center_spread * rng.normal(size=(n_classes, ambient_dim)) / np.sqrt(ambient_dim)
    labels = np.repeat(np.arange(n_classes), per_class)
    latents = rng.random(size=(labels.shape[0], intrinsic_dim))
    ds = SynthClassDataset(
        points=np.empty((labels.shape[0], ambient_dim)),
        labels=labels,
        latents=latents,
        freqs=freqs,
        phases=phases,
        maps=maps,
        centers=centers,
    )
    ds.points = ds.embed(labels, latents)
    return ds


def export_points_csv(points: np.ndarray, labels: np.ndarray | None, path: str | Path) -> None:
    """One point per row, coordinates then an optional trailing label column."""
    points = np.asarray(points)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for i in range(points.shape[0]):
            row = [repr(float(v)) for v in points[i]]
            if labels is not None:
                row.append(str(int(labels[i])))
            writer.writerow(row)
