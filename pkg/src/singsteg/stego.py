"""Public hide/extract/sample API and the ``.sgn`` model container.

The container is the only artifact a sender transmits. Layout, all
integers little-endian:

====== ======== ======================================================
offset size     content
====== ======== ======================================================
0      8        magic ``b"SGNMODEL"``
8      4        format version (uint32)
12     8        header length ``hlen`` (uint64)
20     hlen     UTF-8 JSON header: architecture config, pyramid dims,
                ratio, per-level noise amplitudes, noise/shuffle scheme
                ids, obfuscation flag, and the tensor manifest
                ``[[name, shape], ...]``
...    varies   tensor blob: each manifest entry's values as float32
                little-endian, C order, concatenated in manifest order
end-32 32       SHA-256 digest of every preceding byte
====== ======== ======================================================

Only generator tensors are stored; the critic is a training-time tool
and never travels.
"""

import hashlib
import json
import struct

import numpy as np
import torch

from . import keynoise, netarch, pyramid, trainer
from .keynoise import EmbeddingKey, SchemeMismatchError, ShuffleKey
from .netarch import GrowingGenerator, StegoModel

MAGIC = b"SGNMODEL"
_HEAD = struct.Struct("<8sIQ")
_DIGEST_LEN = 32


class ModelFormatError(ValueError):
    """Not a model container (bad magic or malformed structure)."""


class UnsupportedVersionError(ModelFormatError):
    """Container produced by an unknown format version."""


class ChecksumError(ModelFormatError):
    """Container bytes fail integrity validation."""


def _tensor_manifest(gen: GrowingGenerator):
    items = list(gen.named_parameters())
    items += [(name, buf) for name, buf in gen.named_buffers()
              if not name.endswith("num_batches_tracked")]
    return items


def save(model: StegoModel) -> bytes:
    """Serialize a model to container bytes."""
    manifest = _tensor_manifest(model.generator)
    header = {
        "width": model.width,
        "kernel": model.generator.kernel,
        "block_layers": model.generator.block_layers,
        "blocks": len(model.generator.blocks),
        "pyramid_dims": [list(d) for d in model.pyramid_dims],
        "ratio": model.ratio,
        "noise_amps": list(model.noise_amps),
        "noise_scheme": model.noise_scheme,
        "obfuscated": model.obfuscated,
        "shuffle_scheme": model.shuffle_scheme,
        "trainable_window": model.trainable_window,
        "tensors": [[name, list(t.shape)] for name, t in manifest],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [_HEAD.pack(MAGIC, model.format_version, len(header_bytes)), header_bytes]
    for _, t in manifest:
        parts.append(t.detach().numpy().astype("<f4").tobytes(order="C"))
    payload = b"".join(parts)
    return payload + hashlib.sha256(payload).digest()


def load(data: bytes) -> StegoModel:
    """Rebuild a model from container bytes, validating integrity."""
    if len(data) < _HEAD.size + _DIGEST_LEN:
        raise ChecksumError("container truncated")
    magic, version, hlen = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}")
    if version != netarch.FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported format version {version}")
    payload, digest = data[:-_DIGEST_LEN], data[-_DIGEST_LEN:]
    if hashlib.sha256(payload).digest() != digest:
        raise ChecksumError("SHA-256 digest mismatch")
    if _HEAD.size + hlen > len(payload):
        raise ChecksumError("header extends past container")
    header = json.loads(payload[_HEAD.size:_HEAD.size + hlen].decode("utf-8"))

    gen = GrowingGenerator(header["width"], header["kernel"], header["block_layers"])
    for _ in range(header["blocks"] - 1):
        gen.grow(torch.Generator())
    state = {}
    offset = _HEAD.size + hlen
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(payload):
            raise ChecksumError("tensor blob extends past container")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape)
        state[name] = torch.from_numpy(arr.copy())
        offset = end
    if offset != len(payload):
        raise ChecksumError("trailing bytes after tensor blob")
    missing = gen.load_state_dict(state, strict=False)
    unexpected = [k for k in missing.missing_keys if not k.endswith("num_batches_tracked")]
    if unexpected or missing.unexpected_keys:
        raise ModelFormatError(f"tensor manifest does not match architecture: {unexpected}")
    gen.eval()
    for p in gen.parameters():
        p.requires_grad_(False)

    return StegoModel(
        generator=gen,
        pyramid_dims=[tuple(d) for d in header["pyramid_dims"]],
        ratio=header["ratio"],
        noise_amps=list(header["noise_amps"]),
        noise_scheme=header["noise_scheme"],
        obfuscated=header["obfuscated"],
        shuffle_scheme=header["shuffle_scheme"],
        width=header["width"],
        trainable_window=header["trainable_window"],
        format_version=version,
    )


def save_model(model: StegoModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(save(model))


def load_model(path) -> StegoModel:
    with open(path, "rb") as fh:
        return load(fh.read())


def hide(cover: np.ndarray, secrets, keys, obfuscate: bool = False,
         shuffle_keys=None, cfg: trainer.TrainConfig | None = None) -> StegoModel:
    """Train a stego model hiding ``secrets`` behind ``keys``.

    With ``obfuscate`` each secret is pixel-shuffled by its shuffle key
    before training, so even a leaked embedding key reveals scrambled
    content only. The returned model plus the keys is everything the
    receiver needs; no decoder network exists.
    """
    if not 1 <= len(secrets) <= trainer.MAX_SECRETS:
        raise ValueError(f"hide: need 1 to {trainer.MAX_SECRETS} secrets")
    if len(keys) != len(secrets):
        raise ValueError("hide: one embedding key per secret required")
    if len(set(k.key_bytes for k in keys)) != len(keys):
        raise ValueError("hide: duplicate embedding keys")
    if obfuscate != (shuffle_keys is not None):
        raise ValueError("hide: shuffle keys required iff obfuscate is set")
    cfg = cfg or trainer.TrainConfig()

    train_secrets = list(secrets)
    if obfuscate:
        if len(shuffle_keys) != len(secrets):
            raise ValueError("hide: one shuffle key per secret required")
        h, w = cover.shape[0], cover.shape[1]
        perm_cache = [keynoise.shuffle_permutation(sk, h * w) for sk in shuffle_keys]
        train_secrets = []
        for sec, perm in zip(secrets, perm_cache):
            sec_f = pyramid.dequantize(sec)
            if sec.shape[:2] != (h, w):
                sec_f = pyramid.resize(sec_f, h, w)
            train_secrets.append(pyramid.quantize(keynoise.shuffle_image(sec_f, perm)))

    model = trainer.train(cover, train_secrets, keys, cfg)
    model.obfuscated = obfuscate
    model.shuffle_scheme = shuffle_keys[0].scheme_id if obfuscate else None
    return model


def extract(model: StegoModel, key: EmbeddingKey,
            shuffle_key: ShuffleKey | None = None) -> np.ndarray:
    """Re-derive the keyed noise pyramid and run one forward pass.

    Deterministic and read-only; no optimization happens at extraction
    time.
    """
    if key.scheme_id != model.noise_scheme:
        raise SchemeMismatchError(
            f"key scheme {key.scheme_id!r} does not match model scheme {model.noise_scheme!r}"
        )
    if model.obfuscated:
        if shuffle_key is None:
            raise ValueError("extract: model is obfuscated, shuffle key required")
        if shuffle_key.scheme_id != model.shuffle_scheme:
            raise SchemeMismatchError(
                f"shuffle scheme {shuffle_key.scheme_id!r} does not match "
                f"model scheme {model.shuffle_scheme!r}"
            )
    noise = keynoise.noise_pyramid(key, model.pyramid_dims)
    img = netarch.generator_forward(model.generator, noise, model.noise_amps,
                                    to_stage=0, pyramid_dims=model.pyramid_dims)
    if model.obfuscated:
        h, w = img.shape[0], img.shape[1]
        perm = keynoise.shuffle_permutation(shuffle_key, h * w)
        img = keynoise.unshuffle_image(img, perm)
    return pyramid.quantize(img)


def sample(model: StegoModel, sample_seed: int, dims=None) -> np.ndarray:
    """Draw one unconditional sample; same seed, same sample.

    ``dims`` overrides the output (h, w); every pyramid level is scaled
    proportionally. Defaults to the cover dims the model was trained on.
    """
    rng = torch.Generator().manual_seed(sample_seed)
    level_dims = list(model.pyramid_dims)
    if dims is not None:
        h0, w0 = level_dims[0]
        th, tw = dims
        level_dims = [(max(1, int(h * th / h0 + 0.5)), max(1, int(w * tw / w0 + 0.5)))
                      for h, w in level_dims]
        level_dims[0] = (th, tw)
    maps = [torch.randn(h, w, generator=rng).numpy() for h, w in level_dims]
    img = netarch.generator_forward(model.generator, maps, model.noise_amps, to_stage=0)
    return pyramid.quantize(img)
