"""Latent structural causal models with a labelling hyperplane.

Two latent graphs are supported:

* ``fiif``: ``Z_true -> Y -> Z_spu`` (the spurious block is generated from the label)
* ``piif``: ``Z_true -> Y`` and ``Z_true -> Z_spu``

In both, ``Y = 1[w_true . Z_true > 0] XOR Bernoulli(q)`` and the observation is
``X = S (Z_true, Z_spu)``.  Latent blocks are always concatenated with the true
block first.

An :class:`Intervention` replaces the structural assignment of one latent block
(a point mass or an exogenous draw); edges into that block are cut, edges out of
it are kept.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

SPU = "spu"
TRUE = "true"
FIIF = "fiif"
PIIF = "piif"


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class Intervention:
    """Perfect intervention on one latent block.

    ``kind`` is ``"none"``, ``"atomic"`` (``value`` holds the point) or
    ``"stochastic"`` (``params`` names the family):

    * ``{"family": "uniform", "low": a, "high": b}``: i.i.d. U(a, b) coordinates
    * ``{"family": "bernoulli_sign", "p": p, "scale": c, "noise": s}``: one sign
      ``+-c`` per row with P(+) = p, copied to every coordinate, plus N(0, s^2)
    """

    target: str = SPU
    kind: str = "none"
    value: Optional[tuple] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.target not in (SPU, TRUE):
            raise ValueError(f"unknown intervention target {self.target!r}")
        if self.kind not in ("none", "atomic", "stochastic"):
            raise ValueError(f"unknown intervention kind {self.kind!r}")
        if self.kind == "atomic" and self.value is None:
            raise ValueError("atomic intervention needs a value")
        if self.kind == "stochastic" and self.params.get("family") not in ("uniform", "bernoulli_sign"):
            raise ValueError(f"unsupported stochastic family {self.params.get('family')!r}")

    @property
    def active(self):
        return self.kind != "none"

    def sample(self, n, dim, rng):
        if self.kind == "atomic":
            value = np.asarray(self.value, dtype=float)
            if value.shape != (dim,):
                raise DimensionError(f"atomic value has shape {value.shape}, target block has {dim} coordinates")
            return np.tile(value, (n, 1))
        family = self.params["family"]
        if family == "uniform":
            return rng.uniform(self.params.get("low", -1.0), self.params.get("high", 1.0), size=(n, dim))
        p = self.params.get("p", 0.5)
        scale = self.params.get("scale", 1.0)
        sign = np.where(rng.random(n) < p, 1.0, -1.0)
        out = np.repeat(scale * sign[:, None], dim, axis=1)
        noise = self.params.get("noise", 0.0)
        if noise:
            out = out + noise * rng.standard_normal((n, dim))
        return out


NO_INTERVENTION = Intervention()


@dataclass(frozen=True)
class GaussianBlock:
    """Isotropic Gaussian base distribution for Z_true."""

    scale: float = 1.0

    def __call__(self, n, dim, rng):
        return self.scale * rng.standard_normal((n, dim))


@dataclass(frozen=True)
class LabelShiftBlock:
    """FIIF mechanism: Z_spu = strength * (2y - 1) * 1 + noise."""

    strength: float = 1.0
    noise: float = 1.0

    def __call__(self, y, dim, rng):
        sign = 2.0 * np.asarray(y, dtype=float) - 1.0
        return self.strength * sign[:, None] + self.noise * rng.standard_normal((len(sign), dim))


@dataclass(frozen=True)
class LinearCouplingBlock:
    """PIIF mechanism: Z_spu = coupling * A z_true + noise with A a fixed all-ones map."""

    coupling: float = 1.0
    noise: float = 1.0

    def __call__(self, z_true, dim, rng):
        drive = z_true.sum(axis=1) / np.sqrt(z_true.shape[1])
        return self.coupling * drive[:, None] + self.noise * rng.standard_normal((len(z_true), dim))


@dataclass(frozen=True)
class SCMSpec:
    m: int
    o: int
    w_true: np.ndarray
    q: float = 0.0
    graph_kind: str = FIIF
    mixing: Optional[np.ndarray] = None
    true_base: Callable = GaussianBlock()
    spu_mechanism: Optional[Callable] = None

    def __post_init__(self):
        w = np.asarray(self.w_true, dtype=float)
        object.__setattr__(self, "w_true", w)
        if w.shape != (self.m,):
            raise DimensionError(f"w_true has shape {w.shape}, expected ({self.m},)")
        if abs(np.linalg.norm(w) - 1.0) > 1e-10:
            raise ValueError("w_true must be a unit vector")
        if not 0.0 <= self.q < 0.5:
            raise ValueError(f"label noise must lie in [0, 0.5), got {self.q}")
        if self.graph_kind not in (FIIF, PIIF):
            raise ValueError(f"unknown graph kind {self.graph_kind!r}")
        if self.mixing is not None:
            s = np.asarray(self.mixing, dtype=float)
            d = self.m + self.o
            if s.shape != (d, d):
                raise DimensionError(f"mixing matrix has shape {s.shape}, expected ({d}, {d})")
            if np.max(np.abs(s.T @ s - np.eye(d))) > 1e-8:
                raise ValueError("mixing matrix must be orthogonal")
            object.__setattr__(self, "mixing", s)
        if self.spu_mechanism is None:
            default = LabelShiftBlock() if self.graph_kind == FIIF else LinearCouplingBlock()
            object.__setattr__(self, "spu_mechanism", default)


@dataclass(frozen=True)
class EnvironmentSpec:
    """One environment: a data family, its parameters and an intervention.

    ``scm`` is only used by the generic ``"scm"`` family; the other families
    carry their own structural equations (see :mod:`fmi.datagen`).
    """

    id: str
    family: str = "scm"
    params: dict = field(default_factory=dict)
    intervention: Intervention = NO_INTERVENTION
    scm: Optional[SCMSpec] = None


def sample_latent(env, n, rng):
    """Sample ``(z_true, z_spu, y)`` from the environment's latent SCM."""
    scm = env.scm
    if scm is None:
        raise ValueError(f"environment {env.id!r} has no SCM attached")
    if n < 1:
        raise ValueError("n must be >= 1")
    iv = env.intervention

    if iv.active and iv.target == TRUE:
        z_true = iv.sample(n, scm.m, rng)
    else:
        z_true = scm.true_base(n, scm.m, rng)

    flips = rng.random(n) < scm.q
    y = ((z_true @ scm.w_true > 0) ^ flips).astype(np.int64)

    if iv.active and iv.target == SPU:
        z_spu = iv.sample(n, scm.o, rng)
    elif scm.graph_kind == FIIF:
        z_spu = scm.spu_mechanism(y, scm.o, rng)
    else:
        z_spu = scm.spu_mechanism(z_true, scm.o, rng)
    return z_true, z_spu, y


def mix(z_true, z_spu, scm):
    if len(z_true) != len(z_spu):
        raise DimensionError("latent blocks have different row counts")
    z = np.concatenate([z_true, z_spu], axis=1)
    if scm.mixing is None:
        return z
    return z @ scm.mixing.T


def unmix(x, scm):
    """Invert :func:`mix`; returns ``(z_true, z_spu)``."""
    z = x if scm.mixing is None else x @ scm.mixing
    return z[:, : scm.m], z[:, scm.m :]
