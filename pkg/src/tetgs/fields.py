"""Analytic signed distance fields used for grid initialization and guidance targets."""

from __future__ import annotations

import numpy as np


class ScalarField:
    """Deterministic point -> signed distance evaluation.

    Subclasses implement :meth:`evaluate` on an (N, 3) array. Negative values
    are inside the surface.
    """

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        single = points.ndim == 1
        values = self.evaluate(np.atleast_2d(points))
        return values[0] if single else values


class SphereField(ScalarField):
    def __init__(self, center, radius: float):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)

    def evaluate(self, points):
        return np.linalg.norm(points - self.center, axis=1) - self.radius


class PlaneField(ScalarField):
    """Signed distance to the plane dot(normal, x) = offset (normal need not be unit)."""

    def __init__(self, normal, offset: float):
        normal = np.asarray(normal, dtype=np.float64)
        self.normal = normal / np.linalg.norm(normal)
        self.offset = float(offset) / np.linalg.norm(normal)

    def evaluate(self, points):
        return points @ self.normal - self.offset


class ConstantField(ScalarField):
    def __init__(self, value: float):
        self.value = float(value)

    def evaluate(self, points):
        return np.full(len(points), self.value)


class UnionField(ScalarField):
    """CSG union: pointwise minimum of the child fields."""

    def __init__(self, *children: ScalarField):
        if not children:
            raise ValueError("union of zero fields")
        self.children = children

    def evaluate(self, points):
        values = self.children[0].evaluate(points)
        for child in self.children[1:]:
            values = np.minimum(values, child.evaluate(points))
        return values


def field_from_config(config: dict) -> ScalarField:
    """Build a field from its JSON job description."""
    kind = config["type"]
    if kind == "sphere":
        return SphereField(config["center"], config["radius"])
    if kind == "plane":
        return PlaneField(config["normal"], config["offset"])
    if kind == "constant":
        return ConstantField(config["value"])
    if kind == "union":
        return UnionField(*(field_from_config(c) for c in config["fields"]))
    raise ValueError(f"unknown field type: {kind!r}")
