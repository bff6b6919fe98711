"""Prune/splice mask updates driven by per-layer magnitude thresholds.

Each prunable layer k has a threshold ``a`` and a margin ``m`` (both in units
of that layer's weight standard deviation).  A mask update sets an entry to 0
when ``|w| < a*sd``, to 1 when ``|w| >= (a+m)*sd`` and leaves it alone in
between.  How often a layer gets updated is controlled by a cooling schedule
``p0 / (1 + kappa*iter)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nnet import MaskedNetwork


@dataclass(frozen=True)
class PruningBounds:
    a_max: float = 3.0
    m_max: float = 1.0
    p0_min: float = 0.05
    p0_max: float = 1.0
    kappa_max: float = 10.0

    def __post_init__(self):
        if self.a_max < 0 or self.m_max < 0 or self.kappa_max < 0:
            raise ValueError("pruning bounds must be non-negative")
        if not 0 < self.p0_min <= self.p0_max <= 1:
            raise ValueError("need 0 < p0_min <= p0_max <= 1")

    def box(self, n_layers: int) -> np.ndarray:
        """(d, 2) array of raw lower/upper bounds in ``PruningParams.as_vector`` order."""
        rows = [(0.0, self.a_max), (0.0, self.m_max)] * n_layers
        rows += [(self.p0_min, self.p0_max), (0.0, self.kappa_max)]
        return np.array(rows, dtype=np.float64)


@dataclass(frozen=True)
class PruningParams:
    thresholds: tuple[float, ...]
    margins: tuple[float, ...]
    p0: float = 1.0
    kappa: float = 0.0

    def __post_init__(self):
        if len(self.thresholds) != len(self.margins):
            raise ValueError("thresholds and margins differ in length")

    @property
    def n_layers(self) -> int:
        return len(self.thresholds)

    @property
    def dim(self) -> int:
        return 2 * self.n_layers + 2

    def as_vector(self) -> np.ndarray:
        v = [c for a, m in zip(self.thresholds, self.margins) for c in (a, m)]
        return np.array(v + [self.p0, self.kappa], dtype=np.float64)

    @classmethod
    def from_vector(cls, v) -> "PruningParams":
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 1 or len(v) < 4 or len(v) % 2:
            raise ValueError(f"expected a vector of length 2L+2, got shape {v.shape}")
        body = v[:-2]
        return cls(tuple(float(x) for x in body[0::2]), tuple(float(x) for x in body[1::2]),
                   float(v[-2]), float(v[-1]))

    @classmethod
    def uniform(cls, n_layers: int, a: float, m: float, p0: float = 1.0, kappa: float = 0.0):
        return cls((float(a),) * n_layers, (float(m),) * n_layers, p0, kappa)

    def to_json(self) -> dict:
        return {
            "layers": [{"a": a, "m": m} for a, m in zip(self.thresholds, self.margins)],
            "p0": self.p0,
            "kappa": self.kappa,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PruningParams":
        layers = obj["layers"]
        return cls(tuple(float(d["a"]) for d in layers), tuple(float(d["m"]) for d in layers),
                   float(obj["p0"]), float(obj["kappa"]))


def check_bounds(params: PruningParams, bounds: PruningBounds) -> None:
    box = bounds.box(params.n_layers)
    v = params.as_vector()
    bad = np.flatnonzero((v < box[:, 0]) | (v > box[:, 1]))
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"component {i} = {v[i]} outside [{box[i, 0]}, {box[i, 1]}]")


def normalize(params: PruningParams, bounds: PruningBounds) -> np.ndarray:
    """Affine map of the raw parameters onto [0, 1]^d.

    A component with a zero-width range maps to 0.
    """
    check_bounds(params, bounds)
    box = bounds.box(params.n_layers)
    width = box[:, 1] - box[:, 0]
    v = params.as_vector() - box[:, 0]
    return np.divide(v, width, out=np.zeros_like(v), where=width > 0)


def denormalize(point, bounds: PruningBounds) -> PruningParams:
    z = np.asarray(point, dtype=np.float64)
    if z.ndim != 1 or np.any(z < 0) or np.any(z > 1) or not np.all(np.isfinite(z)):
        raise ValueError("normalized point must lie in [0, 1]^d")
    if len(z) < 4 or len(z) % 2:
        raise ValueError(f"expected 2L+2 components, got {len(z)}")
    box = bounds.box((len(z) - 2) // 2)
    # clip guards against lo + z*(hi-lo) landing one ulp outside the box
    raw = np.clip(box[:, 0] + z * (box[:, 1] - box[:, 0]), box[:, 0], box[:, 1])
    return PruningParams.from_vector(raw)


def cooling_probability(p0: float, kappa: float, iteration: int) -> float:
    if not 0 < p0 <= 1:
        raise ValueError(f"p0 must be in (0, 1], got {p0}")
    if kappa < 0:
        raise ValueError(f"kappa must be >= 0, got {kappa}")
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return p0 / (1.0 + kappa * iteration)


@dataclass
class MaskUpdateStats:
    pruned: list[int] = field(default_factory=list)
    spliced: list[int] = field(default_factory=list)
    updated: list[bool] = field(default_factory=list)
    layer_sparsity: list[float] = field(default_factory=list)
    layer_sizes: list[int] = field(default_factory=list)

    @property
    def sparsity(self) -> float:
        total = sum(self.layer_sizes)
        return sum(s * n for s, n in zip(self.layer_sparsity, self.layer_sizes)) / total


def recompute_mask(weights: np.ndarray, mask: np.ndarray, a: float, m: float) -> np.ndarray:
    sd = weights.std()
    mag = np.abs(weights)
    out = mask.copy()
    out[mag < a * sd] = False
    out[mag >= (a + m) * sd] = True
    return out


def update_masks(net: MaskedNetwork, params: PruningParams, iteration: int,
                 rng: np.random.Generator) -> MaskUpdateStats:
    """Gate each layer with one Bernoulli draw, then threshold its mask.

    A draw is consumed for every layer whether or not it fires, so the rng
    stream does not depend on the outcomes.
    """
    if params.n_layers != len(net.layers):
        raise ValueError(
            f"params cover {params.n_layers} layers, network has {len(net.layers)}"
        )
    p = cooling_probability(params.p0, params.kappa, iteration)
    stats = MaskUpdateStats()
    for layer, a, m in zip(net.layers, params.thresholds, params.margins):
        fire = rng.random() < p
        old = layer.mask
        new = recompute_mask(layer.weights, old, a, m) if fire else old
        stats.updated.append(bool(fire))
        stats.pruned.append(int(np.count_nonzero(old & ~new)))
        stats.spliced.append(int(np.count_nonzero(~old & new)))
        stats.layer_sizes.append(int(new.size))
        stats.layer_sparsity.append(1.0 - np.count_nonzero(new) / new.size)
        layer.mask = new
    return stats


def layer_sparsities(net: MaskedNetwork) -> list[float]:
    return [1.0 - np.count_nonzero(layer.mask) / layer.mask.size for layer in net.layers]


def sparsity(net: MaskedNetwork) -> float:
    """Share of weight entries whose mask is 0 (biases are never counted)."""
    return 1.0 - net.remaining_weights() / net.weight_count
