"""Analytic target bodies with closed-form signed distance.

These serve as exact oracles in tests and as procedural targets for the
closed-loop scenarios. The union is exact outside the body and a bound inside.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


def _pts(points: np.ndarray) -> np.ndarray:
    return np.asarray(points, dtype=float).reshape(-1, 3)


class _Field:
    def value_and_gradient(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.signed_distance(points), self.gradient(points)[0]


@dataclass(frozen=True)
class Sphere(_Field):
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = 1.0

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return np.linalg.norm(_pts(points) - np.asarray(self.center), axis=1) - self.radius

    def gradient(self, points: np.ndarray, tol: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
        rel = _pts(points) - np.asarray(self.center)
        n = np.linalg.norm(rel, axis=1)
        valid = n > tol
        g = np.zeros_like(rel)
        g[valid] = rel[valid] / n[valid, None]
        g[~valid, 2] = 1.0
        return g, valid

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return np.asarray(self.center) + self.radius * d

    def area(self) -> float:
        return 4.0 * np.pi * self.radius**2

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center, dtype=float)
        return c - self.radius, c + self.radius


@dataclass(frozen=True)
class Box(_Field):
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    half_extents: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def _q(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        rel = _pts(points) - np.asarray(self.center)
        return rel, np.abs(rel) - np.asarray(self.half_extents)

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        _, q = self._q(points)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside

    def gradient(self, points: np.ndarray, tol: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
        """Gradient and a mask that is False within ``tol`` of the interior medial set."""
        rel, q = self._q(points)
        sgn = np.where(rel >= 0.0, 1.0, -1.0)
        pos = np.maximum(q, 0.0)
        npos = np.linalg.norm(pos, axis=1)
        out = npos > 0.0
        g = np.zeros_like(rel)
        g[out] = sgn[out] * pos[out] / npos[out, None]
        idx = np.argmax(q, axis=1)
        ins = ~out
        g[ins, idx[ins]] = sgn[ins, idx[ins]]
        qs = np.sort(q, axis=1)
        valid = out | (qs[:, 2] - qs[:, 1] > tol)
        return g, valid

    def area(self) -> float:
        a, b, c = (2.0 * np.asarray(self.half_extents))
        return 2.0 * (a * b + b * c + c * a)

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        h = np.asarray(self.half_extents, dtype=float)
        face_area = np.array([h[1] * h[2], h[1] * h[2], h[0] * h[2], h[0] * h[2], h[0] * h[1], h[0] * h[1]])
        face = rng.choice(6, size=n, p=face_area / face_area.sum())
        u = rng.uniform(-1.0, 1.0, size=(n, 3)) * h
        axis = face // 2
        u[np.arange(n), axis] = np.where(face % 2 == 0, -1.0, 1.0) * h[axis]
        return np.asarray(self.center) + u

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center, dtype=float)
        h = np.asarray(self.half_extents, dtype=float)
        return c - h, c + h


class Union(_Field):
    """Union of primitives; distance is the minimum over parts."""

    def __init__(self, parts: Sequence[Sphere | Box]) -> None:
        if not parts:
            raise ValueError("union needs at least one part")
        self.parts = tuple(parts)

    def _all(self, points: np.ndarray) -> np.ndarray:
        return np.stack([p.signed_distance(points) for p in self.parts], axis=1)

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return self._all(points).min(axis=1)

    def _gradient_from(self, pts: np.ndarray, d: np.ndarray, tol: float) -> tuple[np.ndarray, np.ndarray]:
        which = np.argmin(d, axis=1)
        g = np.zeros_like(pts)
        valid = np.ones(len(pts), dtype=bool)
        for k, part in enumerate(self.parts):
            sel = which == k
            if np.any(sel):
                gk, vk = part.gradient(pts[sel], tol)
                g[sel] = gk
                valid[sel] = vk
        if d.shape[1] > 1:
            ds = np.sort(d, axis=1)
            valid &= ds[:, 1] - ds[:, 0] > tol
        return g, valid

    def gradient(self, points: np.ndarray, tol: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
        pts = _pts(points)
        return self._gradient_from(pts, self._all(pts), tol)

    def value_and_gradient(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pts = _pts(points)
        d = self._all(pts)
        return d.min(axis=1), self._gradient_from(pts, d, 1e-9)[0]

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform samples on the union boundary (parts' surfaces minus overlaps)."""
        areas = np.array([p.area() for p in self.parts])
        out: list[np.ndarray] = []
        have = 0
        while have < n:
            m = max(2 * (n - have), 64)
            part = rng.choice(len(self.parts), size=m, p=areas / areas.sum())
            cand = np.empty((m, 3))
            for k, p in enumerate(self.parts):
                sel = part == k
                if np.any(sel):
                    cand[sel] = p.sample_surface(int(sel.sum()), rng)
            keep = np.ones(m, dtype=bool)
            for k, p in enumerate(self.parts):
                other = part != k
                keep[other] &= p.signed_distance(cand[other]) >= 0.0
            cand = cand[keep]
            out.append(cand)
            have += len(cand)
        return np.concatenate(out)[:n]

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.min([p.bounds()[0] for p in self.parts], axis=0)
        hi = np.max([p.bounds()[1] for p in self.parts], axis=0)
        return lo, hi


def sphere_with_panels(
    radius: float = 2.0,
    panel_length: float = 6.0,
    panel_width: float = 2.0,
    panel_thickness: float = 0.1,
    embed: float = 0.1,
) -> Union:
    """Spherical bus with two flat solar panels along the ±y axis.

    Panels are ``panel_length`` long in y, ``panel_width`` wide in x and
    ``panel_thickness`` thin in z, and overlap the sphere by ``embed``.
    """
    hy = panel_length / 2.0
    cy = radius - embed + hy
    half = (panel_width / 2.0, hy, panel_thickness / 2.0)
    return Union([
        Sphere((0.0, 0.0, 0.0), radius),
        Box((0.0, cy, 0.0), half),
        Box((0.0, -cy, 0.0), half),
    ])
