"""Categorical attribute labels <-> normalized shape-space coordinates.

Every attribute owns one or more beta dimensions and a list of named anchors
pinned to coordinates in [0, 1]. Unrecognized or missing labels fall back to
the center of the range (0.5).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .body_model import AGE_DIM, GENDER_DIM, MUSCLE_DIM, WEIGHT_DIM
from .errors import ConfigurationError

UNKNOWN = "unknown"


@dataclass(frozen=True)
class Anchor:
    label: str
    values: dict  # beta dim index -> coordinate in [0, 1]


@dataclass(frozen=True)
class AttributeCatalog:
    shape_dim: int
    attributes: dict  # name -> tuple[Anchor, ...]

    def __post_init__(self):
        for name, anchors in self.attributes.items():
            for a in anchors:
                for dim, val in a.values.items():
                    if not (0 <= dim < self.shape_dim):
                        raise ConfigurationError(f"anchor dim {dim} outside shape space ({name})")
                    if not (0.0 <= val <= 1.0):
                        raise ConfigurationError(f"anchor value {val} outside [0, 1] ({name}:{a.label})")

    def dims_of(self, attribute: str) -> tuple:
        anchors = self._anchors(attribute)
        dims = sorted({d for a in anchors for d in a.values})
        return tuple(dims)

    def _anchors(self, attribute: str):
        if attribute not in self.attributes:
            raise ConfigurationError(f"unknown attribute {attribute!r}")
        return self.attributes[attribute]

    def labels_of(self, attribute: str) -> tuple:
        return tuple(a.label for a in self._anchors(attribute))

    def to_dict(self) -> dict:
        return {
            "shape_dim": self.shape_dim,
            "attributes": {
                name: [{"label": a.label, "values": {str(k): v for k, v in a.values.items()}} for a in anchors]
                for name, anchors in self.attributes.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttributeCatalog":
        attrs = {
            name: tuple(
                Anchor(label=a["label"], values={int(k): float(v) for k, v in a["values"].items()})
                for a in anchors
            )
            for name, anchors in d["attributes"].items()
        }
        return cls(shape_dim=int(d["shape_dim"]), attributes=attrs)


# Age anchors: adult pinned at 0.66, extra resolution at early ages where
# shape changes fastest. Configurable via --anchors; values are defaults,
# not ground truth.
DEFAULT_AGE_ANCHORS = (
    ("baby", 0.02),
    ("toddler", 0.06),
    ("child", 0.14),
    ("teenager", 0.35),
    ("adult", 0.66),
    ("senior", 0.92),
)

DEFAULT_GENDER_ANCHORS = (("male", 0.0), ("neutral", 0.5), ("female", 1.0))

DEFAULT_BODYTYPE_ANCHORS = (
    ("slim", {MUSCLE_DIM: 0.3, WEIGHT_DIM: 0.3}),
    ("average", {MUSCLE_DIM: 0.4, WEIGHT_DIM: 0.7}),
    ("overweight", {MUSCLE_DIM: 0.1, WEIGHT_DIM: 0.8}),
    ("muscular", {MUSCLE_DIM: 0.9, WEIGHT_DIM: 0.7}),
)


def default_catalog(shape_dim: int = 10) -> AttributeCatalog:
    return AttributeCatalog(
        shape_dim=shape_dim,
        attributes={
            "age": tuple(Anchor(lbl, {AGE_DIM: v}) for lbl, v in DEFAULT_AGE_ANCHORS),
            "gender": tuple(Anchor(lbl, {GENDER_DIM: v}) for lbl, v in DEFAULT_GENDER_ANCHORS),
            "bodytype": tuple(Anchor(lbl, dict(vals)) for lbl, vals in DEFAULT_BODYTYPE_ANCHORS),
        },
    )


@dataclass
class MappedLabel:
    values: dict  # dim -> coordinate
    known: bool  # False when the label fell back to "unknown"


@dataclass
class ShapeEstimate:
    """The simulated attribute-expert output F: a point in [0, 1]^S plus
    per-dimension provenance flags (False = defaulted to 0.5)."""

    f: np.ndarray
    provided: np.ndarray
    warnings: tuple = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "f": self.f.tolist(),
            "provided": [bool(p) for p in self.provided],
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeEstimate":
        return cls(
            f=np.asarray(d["f"], dtype=np.float64),
            provided=np.asarray(d["provided"], dtype=bool),
            warnings=tuple(d.get("warnings", ())),
        )


def exact_estimate(beta: np.ndarray) -> ShapeEstimate:
    """A perfect-oracle F equal to beta itself (all dimensions provided)."""
    beta = np.asarray(beta, dtype=np.float64)
    return ShapeEstimate(f=beta.copy(), provided=np.ones(beta.shape, dtype=bool))


def map_category(catalog: AttributeCatalog, attribute: str, label: str) -> MappedLabel:
    """Anchor coordinates for a label; unrecognized labels map to the center
    of the range with known=False."""
    anchors = catalog._anchors(attribute)
    for a in anchors:
        if a.label == label:
            return MappedLabel(values=dict(a.values), known=True)
    dims = catalog.dims_of(attribute)
    return MappedLabel(values={d: 0.5 for d in dims}, known=label == UNKNOWN)


def build_estimate(catalog: AttributeCatalog, labels: dict) -> ShapeEstimate:
    """Compose per-attribute labels into F; unset dimensions default to 0.5."""
    f = np.full(catalog.shape_dim, 0.5)
    provided = np.zeros(catalog.shape_dim, dtype=bool)
    warnings: list[str] = []
    for attribute, label in labels.items():
        mapped = map_category(catalog, attribute, label)
        if not mapped.known:
            warnings.append(f"{attribute}:{label}")
        for dim, val in mapped.values.items():
            f[dim] = val
            provided[dim] = mapped.known
    return ShapeEstimate(f=f, provided=provided, warnings=tuple(warnings))


def classify_beta(catalog: AttributeCatalog, beta: np.ndarray) -> dict:
    """Nearest-anchor label per attribute; ties break toward the anchor with
    the lower coordinate values (catalog order as final tiebreak)."""
    beta = np.asarray(beta, dtype=np.float64)
    out = {}
    for attribute, anchors in catalog.attributes.items():
        best = None
        for order, a in enumerate(anchors):
            d2 = sum((beta[dim] - val) ** 2 for dim, val in a.values.items())
            key = (d2, tuple(sorted(a.values.values())), order)
            if best is None or key < best[0]:
                best = (key, a.label)
        out[attribute] = best[1]
    return out
