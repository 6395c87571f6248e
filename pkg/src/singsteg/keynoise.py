"""Deterministic key-derived noise pyramids and pixel permutations.

Everything here is a pure function of (key bytes, scheme id, shape), so a
sender and a receiver holding the same key regenerate identical noise on
independent implementations. The byte-level schemes are fixed and named;
the scheme id travels inside the model file so both ends can verify they
speak the same dialect.

Scheme ``cbrng-bm-v1`` (Gaussian noise):

* ``seed``  = first 8 bytes, big-endian, of SHA-256(key bytes).
* ``u64(i)`` = splitmix64 finalizer of ``seed + (i+1) * 0x9E3779B97F4A7C15``
  (all arithmetic mod 2**64):
  ``z ^= z >> 30; z *= 0xBF58476D1CE4E5B9; z ^= z >> 27;
  z *= 0x94D049BB133111EB; z ^= z >> 31``.
* normal sample j uses the counter pair (2j, 2j+1):
  ``u1 = ((u64(2j)   >> 11) + 1) * 2**-53``  (in (0, 1]),
  ``u2 =  (u64(2j+1) >> 11)      * 2**-53``  (in [0, 1)),
  ``normal(j) = sqrt(-2 ln u1) * cos(2 pi u2)``.
* a pyramid consumes one flat sample stream: levels are filled coarsest
  first, each level row-major, one channel per level.

Scheme ``fy-v1`` (permutations): seed as above, then a Fisher-Yates pass
``for i in n-1 .. 1: j = u64(t) mod (i+1); swap(p[i], p[j]); t += 1``
starting from the identity permutation and counter t = 0. The modulo has
a bias below 2**-32 for any image-sized n, which we accept for the sake
of a one-line cross-language description.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

NOISE_SCHEME = "cbrng-bm-v1"
SHUFFLE_SCHEME = "fy-v1"
REGISTERED_SCHEMES = {NOISE_SCHEME, SHUFFLE_SCHEME}

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


class SchemeMismatchError(ValueError):
    """A key's derivation scheme does not match what the model expects."""


def _check_scheme(scheme_id: str) -> str:
    if scheme_id not in REGISTERED_SCHEMES:
        raise SchemeMismatchError(f"unknown derivation scheme {scheme_id!r}")
    return scheme_id


@dataclass(frozen=True)
class EmbeddingKey:
    """Shared secret seeding the extraction noise pyramid."""

    key_bytes: bytes
    scheme_id: str = NOISE_SCHEME

    def __post_init__(self):
        if not self.key_bytes:
            raise ValueError("EmbeddingKey: key bytes must be non-empty")
        _check_scheme(self.scheme_id)

    @classmethod
    def from_text(cls, text: str, scheme_id: str = NOISE_SCHEME) -> "EmbeddingKey":
        return cls(text.encode("utf-8"), scheme_id)


@dataclass(frozen=True)
class ShuffleKey:
    """Shared secret seeding the pixel permutation."""

    key_bytes: bytes
    scheme_id: str = SHUFFLE_SCHEME

    def __post_init__(self):
        if not self.key_bytes:
            raise ValueError("ShuffleKey: key bytes must be non-empty")
        _check_scheme(self.scheme_id)

    @classmethod
    def from_text(cls, text: str, scheme_id: str = SHUFFLE_SCHEME) -> "ShuffleKey":
        return cls(text.encode("utf-8"), scheme_id)


@dataclass
class NoisePyramid:
    """One Gaussian map per pyramid level; ``maps[n]`` matches level n."""

    maps: list = field(default_factory=list)

    @property
    def dims(self):
        return [(m.shape[0], m.shape[1]) for m in self.maps]


def derive_seed(key) -> int:
    """64-bit seed: first 8 bytes (big-endian) of SHA-256 of the key bytes."""
    if not key.key_bytes:
        raise ValueError("derive_seed: empty key")
    digest = hashlib.sha256(key.key_bytes).digest()
    return int.from_bytes(digest[:8], "big")


def _u64_stream(seed: int, start: int, count: int) -> np.ndarray:
    """Counter-based u64 outputs at indices [start, start+count)."""
    idx = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    z = np.uint64(seed) + idx * _GAMMA
    z ^= z >> np.uint64(30)
    z *= _MIX1
    z ^= z >> np.uint64(27)
    z *= _MIX2
    z ^= z >> np.uint64(31)
    return z


def _normals(seed: int, start: int, count: int) -> np.ndarray:
    """Standard-normal samples j = start .. start+count-1 of the stream."""
    raw = _u64_stream(seed, 2 * start, 2 * count)
    u1 = ((raw[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
    u2 = (raw[1::2] >> np.uint64(11)).astype(np.float64) * 2.0**-53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def noise_field(key: EmbeddingKey, h: int, w: int, start: int = 0) -> np.ndarray:
    """One (h, w) float32 standard-normal map starting at stream index `start`."""
    return _normals(derive_seed(key), start, h * w).reshape(h, w).astype(np.float32)


def noise_pyramid(key: EmbeddingKey, dims) -> NoisePyramid:
    """Deterministic Gaussian noise pyramid for the given level dims.

    ``dims`` is the ladder of (h, w) pairs, finest first, as produced by
    :meth:`ImagePyramid.dims`. The sample stream fills levels coarsest
    first so a model grown by one stage extends, rather than reshuffles,
    the coarser maps.
    """
    seed = derive_seed(key)
    maps = [None] * len(dims)
    start = 0
    for n in range(len(dims) - 1, -1, -1):
        h, w = dims[n]
        maps[n] = _normals(seed, start, h * w).reshape(h, w).astype(np.float32)
        start += h * w
    return NoisePyramid(maps=maps)


def shuffle_permutation(key: ShuffleKey, n: int) -> np.ndarray:
    """Keyed Fisher-Yates permutation of [0, n)."""
    if n < 1:
        raise ValueError("shuffle_permutation: n must be >= 1")
    seed = derive_seed(key)
    perm = np.arange(n, dtype=np.int64)
    if n == 1:
        return perm
    draws = _u64_stream(seed, 0, n - 1)
    bounds = np.arange(n, 1, -1, dtype=np.uint64)  # i+1 for i = n-1 .. 1
    js = (draws % bounds).astype(np.int64)
    for t, i in enumerate(range(n - 1, 0, -1)):
        j = js[t]
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def shuffle_image(img: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Apply a spatial permutation identically to all channels.

    ``out_flat[i] = in_flat[perm[i]]`` where flat indexing is row-major
    over the h*w pixel grid.
    """
    h, w = img.shape[0], img.shape[1]
    if len(perm) != h * w:
        raise ValueError(f"shuffle_image: permutation length {len(perm)} != {h}*{w}")
    flat = img.reshape(h * w, -1)
    return flat[perm].reshape(img.shape).copy()


def unshuffle_image(img: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Exact inverse of :func:`shuffle_image` for the same permutation."""
    h, w = img.shape[0], img.shape[1]
    if len(perm) != h * w:
        raise ValueError(f"unshuffle_image: permutation length {len(perm)} != {h}*{w}")
    flat = img.reshape(h * w, -1)
    out = np.empty_like(flat)
    out[perm] = flat
    return out.reshape(img.shape).copy()
