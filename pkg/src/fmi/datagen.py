"""Dataset builders and the on-disk dataset format.

Families:

``example2`` / ``example2s``
    Cow/camel linear unit test.  Animal (invariant, tiny scale) and background
    (spurious, large scale) blocks; ``example2s`` rotates the latents with a
    random orthogonal matrix shared by every environment of a family seed.
``cmnist-syn``
    Low-dimensional Colored-MNIST analogue with known Bayes rates.
``cmnist-idx``
    Real MNIST digits read from IDX files and colored red/green.
``scm``
    The generic Gaussian latent SCM of :mod:`fmi.scm`.
"""

import gzip
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .numerics import make_rng, random_orthogonal
from .scm import NO_INTERVENTION, SPU, TRUE, EnvironmentSpec, Intervention, mix, sample_latent

NU_ANIMAL = 1e-2
NU_BACKGROUND = 1.0
# N_d(0, 10^-1) is read as i.i.d. coordinates with variance 0.1
EXAMPLE2_NOISE_STD = math.sqrt(0.1)
CMNIST_NOISE_STD = math.sqrt(0.1)

# (background probability p, cow probability s)
EXAMPLE2_ENVIRONMENTS = {
    "E0": (0.95, 0.3),
    "E1": (0.97, 0.5),
    "E2": (0.99, 0.7),
}
CMNIST_ENVIRONMENTS = (0.1, 0.2, 0.9)

DATASET_MAGIC = b"FMID"
DATASET_VERSION = 1
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DatasetFormatError(ValueError):
    pass


class ChecksumError(DatasetFormatError):
    pass


class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


@dataclass
class LabeledDataset:
    X: np.ndarray
    y: np.ndarray
    env_id: str = ""
    K: int = 2
    latents: Optional[tuple] = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.y.shape != (len(self.X),):
            raise ValueError(f"inconsistent shapes X={self.X.shape} y={self.y.shape}")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.K):
            raise ValueError(f"labels must lie in [0, {self.K})")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("X has non-finite entries")
        if self.latents is not None:
            z_true, z_spu = (np.asarray(z, dtype=np.float64) for z in self.latents)
            if len(z_true) != len(self.X) or len(z_spu) != len(self.X):
                raise ValueError("latent row counts do not match X")
            self.latents = (z_true, z_spu)

    def __len__(self):
        return len(self.y)

    @property
    def d(self):
        return self.X.shape[1]

    def subset(self, idx):
        lat = None if self.latents is None else tuple(z[idx] for z in self.latents)
        return LabeledDataset(self.X[idx], self.y[idx], self.env_id, self.K, lat)

    def split(self, fraction, rng):
        """Random ``(rest, held_out)`` split with ``round(fraction * n)`` held out."""
        perm = rng.permutation(len(self))
        k = int(round(fraction * len(self)))
        return self.subset(np.sort(perm[k:])), self.subset(np.sort(perm[:k]))


def concat(datasets, env_id=None):
    datasets = list(datasets)
    has_lat = all(ds.latents is not None for ds in datasets)
    lat = None
    if has_lat:
        lat = tuple(np.concatenate([ds.latents[i] for ds in datasets]) for i in range(2))
    return LabeledDataset(
        np.concatenate([ds.X for ds in datasets]),
        np.concatenate([ds.y for ds in datasets]),
        env_id if env_id is not None else "+".join(ds.env_id for ds in datasets),
        max(ds.K for ds in datasets),
        lat,
    )


# --------------------------------------------------------------------------
# Example 2 / 2S


@dataclass(frozen=True)
class Example2Params:
    p_e: float
    s_e: float
    d_inv: int = 5
    d_spu: int = 5
    scramble: bool = False
    mixing_seed: int = 0
    label_noise: float = 0.0
    # "animal": background follows the animal (noise flips y afterwards);
    # "label": background follows the observed, possibly flipped, label
    background_parent: str = "animal"
    nu_animal: float = NU_ANIMAL
    nu_background: float = NU_BACKGROUND

    def __post_init__(self):
        for name in ("p_e", "s_e"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not 0.0 <= self.label_noise < 0.5:
            raise ValueError("label_noise must lie in [0, 0.5)")
        if self.background_parent not in ("animal", "label"):
            raise ValueError(f"unknown background_parent {self.background_parent!r}")

    def mixing(self):
        if not self.scramble:
            return None
        return random_orthogonal(self.d_inv + self.d_spu, make_rng(self.mixing_seed))


def extra_example2_environment(rng):
    """Draw (p, s) for environments beyond the three fixed ones."""
    return rng.uniform(0.9, 1.0), rng.uniform(0.3, 0.7)


def shuffled_background(params):
    """Background drawn independently of the animal: grass or sand with equal odds."""
    return Intervention(
        target=SPU,
        kind="stochastic",
        params={
            "family": "bernoulli_sign",
            "p": 0.5,
            "scale": params.nu_background,
            "noise": EXAMPLE2_NOISE_STD * params.nu_background,
        },
    )


def generate_example2(params, n, rng, intervention=NO_INTERVENTION, env_id="example2"):
    if n < 1:
        raise ValueError("n must be >= 1")
    p, s = params.p_e, params.s_e
    # j = 0: cow/grass, 1: cow/sand, 2: camel/sand, 3: camel/grass
    j = rng.choice(4, size=n, p=[p * s, (1 - p) * s, p * (1 - s), (1 - p) * (1 - s)])
    cow = j <= 1
    grass = (j == 0) | (j == 3)

    mu_animal = np.where(cow, 1.0, -1.0)[:, None]
    z_inv = (EXAMPLE2_NOISE_STD * rng.standard_normal((n, params.d_inv)) + mu_animal) * params.nu_animal
    if intervention.active and intervention.target != SPU:
        z_inv = intervention.sample(n, params.d_inv, rng)
    y = z_inv.sum(axis=1) > 0
    if params.label_noise > 0:
        y = y ^ (rng.random(n) < params.label_noise)
    if params.background_parent == "label":
        # same joint law as above when there is no noise: grass agrees with
        # cow (y = 1) with probability p
        agree = rng.random(n) < p
        grass = np.where(y, agree, ~agree)

    mu_background = np.where(grass, 1.0, -1.0)[:, None]
    z_spu = (EXAMPLE2_NOISE_STD * rng.standard_normal((n, params.d_spu)) + mu_background) * params.nu_background
    if intervention.active and intervention.target == SPU:
        z_spu = intervention.sample(n, params.d_spu, rng)

    s_mat = params.mixing()
    z = np.concatenate([z_inv, z_spu], axis=1)
    x = z if s_mat is None else z @ s_mat.T
    return LabeledDataset(x, y.astype(np.int64), env_id, 2, (z_inv, z_spu))


# --------------------------------------------------------------------------
# Colored MNIST


@dataclass(frozen=True)
class CmnistParams:
    label_flip: float = 0.25
    d_true: int = 5
    d_color: int = 5
    noise: float = CMNIST_NOISE_STD
    images: Optional[str] = None
    labels: Optional[str] = None

    def __post_init__(self):
        if not 0.0 <= self.label_flip <= 1.0:
            raise ValueError("label_flip must lie in [0, 1]")

    @property
    def source(self):
        return "synthetic" if self.images is None else "idx_files"


def _color_bits(y, e, n, rng, intervention):
    if not intervention.active or intervention.target != SPU:
        return y ^ (rng.random(n) < e)
    if intervention.kind == "atomic":
        return np.full(n, bool(np.asarray(intervention.value).ravel()[0]))
    return rng.random(n) < intervention.params.get("p", 0.5)


def generate_cmnist_synthetic(params, e, n, rng, intervention=NO_INTERVENTION, env_id=None):
    """Digit-class bit, noisy label and label-tied color, embedded as +-1 blocks."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= e <= 1.0:
        raise ValueError("color flip probability must lie in [0, 1]")
    c = rng.random(n) < 0.5
    if intervention.active and intervention.target == TRUE:
        c = np.full(n, bool(np.asarray(intervention.value).ravel()[0]))
    y = c ^ (rng.random(n) < params.label_flip)
    color = _color_bits(y, e, n, rng, intervention)

    true_block = np.where(c, 1.0, -1.0)[:, None] + params.noise * rng.standard_normal((n, params.d_true))
    color_block = np.where(color, 1.0, -1.0)[:, None] + params.noise * rng.standard_normal((n, params.d_color))
    x = np.concatenate([true_block, color_block], axis=1)
    latents = (c.astype(float)[:, None], color.astype(float)[:, None])
    return LabeledDataset(x, y.astype(np.int64), env_id or f"cmnist-syn-{e}", 2, latents)


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path, expected_magic):
    with _open(path) as f:
        data = f.read()
    if len(data) < 8:
        raise IdxTruncatedError(f"{path}: header truncated")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise IdxMagicError(f"{path}: magic {magic:#010x}, expected {expected_magic:#010x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxTruncatedError(f"{path}: dimension header truncated")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    size = int(np.prod(dims))
    if len(data) - header < size:
        raise IdxTruncatedError(f"{path}: expected {size} payload bytes, found {len(data) - header}")
    return np.frombuffer(data, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(path_images, path_labels):
    """Read IDX image/label files; pixels come back as ``n x (rows*cols)`` in [0, 1]."""
    images = _read_idx(path_images, IDX_IMAGES_MAGIC)
    labels = _read_idx(path_labels, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise IdxCountMismatchError(f"{len(images)} images but {len(labels)} labels")
    pixels = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return pixels, labels.astype(np.int64)


def write_idx(path, array):
    """Write a uint8 array in IDX format (used for fixtures and exports)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def colorize_mnist(pixels, digits, e, rng, label_flip=0.25, intervention=NO_INTERVENTION, env_id=None):
    """Two-channel (red, green) coloring; the inactive channel is zero.

    Color bit 1 is green.  The label is ``1[digit <= 4]`` flipped with
    probability ``label_flip``; the color is the label flipped with probability ``e``.
    """
    digits = np.asarray(digits)
    if digits.min() < 0 or digits.max() > 9:
        raise ValueError("digits must lie in 0..9")
    n = len(digits)
    shape_bit = digits <= 4
    y = shape_bit ^ (rng.random(n) < label_flip)
    color = _color_bits(y, e, n, rng, intervention)
    green = color[:, None]
    x = np.concatenate([np.where(green, 0.0, pixels), np.where(green, pixels, 0.0)], axis=1)
    latents = (shape_bit.astype(float)[:, None], color.astype(float)[:, None])
    return LabeledDataset(x, y.astype(np.int64), env_id or f"cmnist-{e}", 2, latents)


# --------------------------------------------------------------------------
# dispatch on environment specs


def generate(env, n, rng):
    """Build a dataset for an :class:`EnvironmentSpec` of any supported family."""
    fam = env.family
    params = dict(env.params)
    if fam in ("example2", "example2s"):
        if "name" in params:
            params["p_e"], params["s_e"] = EXAMPLE2_ENVIRONMENTS[params.pop("name")]
        params.setdefault("scramble", fam == "example2s")
        return generate_example2(Example2Params(**params), n, rng, env.intervention, env.id)
    if fam == "cmnist-syn":
        e = params.pop("e")
        return generate_cmnist_synthetic(CmnistParams(**params), e, n, rng, env.intervention, env.id)
    if fam == "cmnist-idx":
        e = params.pop("e")
        pixels, digits = load_idx(params.pop("images"), params.pop("labels"))
        if n < len(digits):
            keep = np.sort(rng.permutation(len(digits))[:n])
            pixels, digits = pixels[keep], digits[keep]
        return colorize_mnist(pixels, digits, e, rng, params.get("label_flip", 0.25), env.intervention, env.id)
    if fam == "scm":
        z_true, z_spu, y = sample_latent(env, n, rng)
        return LabeledDataset(mix(z_true, z_spu, env.scm), y, env.id, 2, (z_true, z_spu))
    raise ValueError(f"unknown data family {fam!r}")


# --------------------------------------------------------------------------
# binary dataset format
#
#   "FMID" | u16 version | u32 n | u32 d | u8 K | u8 has_latents
#   f32[n*d] X (row-major) | u8[n] labels
#   if has_latents: u32 m | u32 o | f32[n*m] z_true | f32[n*o] z_spu
#   u32 CRC32 of everything before it
#
# All integers and floats little-endian.  X and latents are stored as f32.

_HEADER = struct.Struct("<4sHIIBB")


def encode_dataset(ds):
    if len(ds) == 0:
        raise ValueError("refusing to save an empty dataset")
    if ds.K > 255:
        raise ValueError("K must fit in a byte")
    parts = [
        _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(ds), ds.d, ds.K, ds.latents is not None),
        ds.X.astype("<f4").tobytes(),
        ds.y.astype(np.uint8).tobytes(),
    ]
    if ds.latents is not None:
        z_true, z_spu = ds.latents
        parts.append(struct.pack("<II", z_true.shape[1], z_spu.shape[1]))
        parts.append(z_true.astype("<f4").tobytes())
        parts.append(z_spu.astype("<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_dataset(blob, env_id=""):
    if len(blob) < _HEADER.size + 4:
        raise DatasetFormatError("dataset file truncated")
    magic, version, n, d, k, has_lat = _HEADER.unpack_from(blob)
    if magic != DATASET_MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("dataset checksum mismatch")
    off = _HEADER.size
    try:
        x = np.frombuffer(body, "<f4", n * d, off).reshape(n, d)
        off += 4 * n * d
        y = np.frombuffer(body, np.uint8, n, off)
        off += n
        latents = None
        if has_lat:
            m, o = struct.unpack_from("<II", body, off)
            off += 8
            z_true = np.frombuffer(body, "<f4", n * m, off).reshape(n, m)
            off += 4 * n * m
            z_spu = np.frombuffer(body, "<f4", n * o, off).reshape(n, o)
            off += 4 * n * o
            latents = (z_true, z_spu)
    except ValueError as exc:
        raise DatasetFormatError(f"dataset payload truncated: {exc}") from None
    if off != len(body):
        raise DatasetFormatError("trailing bytes in dataset payload")
    return LabeledDataset(x, y, env_id, k, latents)


def save_dataset(ds, path):
    Path(path).write_bytes(encode_dataset(ds))


def load_dataset(path, env_id=None):
    """Load a dataset; the environment id is not stored and defaults to the file stem."""
    path = Path(path)
    return decode_dataset(path.read_bytes(), env_id if env_id is not None else path.stem)


def quantized(ds):
    """The dataset as it will read back from disk (f32-rounded)."""
    return decode_dataset(encode_dataset(ds), ds.env_id)
