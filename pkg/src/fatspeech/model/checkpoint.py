"""The FATC checkpoint container, averaging, and warm-start initialization.

Layout, all little-endian: 4-byte magic "FATC", u32 version (1), u32 config
byte length, the config as canonical sorted key=value text (model fields plus
meta.step and meta.vocab_hash), u32 tensor count, then name-sorted tensors as
(u32 name length, name utf-8, u32 ndim, u32 dims..., float32 payload).
Payloads are float32, so save/load of a float32 model is bit-exact.
"""

import struct
from dataclasses import dataclass, fields

import numpy as np

from ..config import model_config_from_text, model_config_text
from ..errors import ConfigMismatchError, FormatError
from .network import FATModel

FATC_MAGIC = b"FATC"
FATC_VERSION = 1

# architecture fields that must agree for transfer initialization
_COMPAT_FIELDS = (
    "d_model", "heads", "acoustic_layers", "shared_layers", "ffn_dim",
    "conv_channels", "d_s", "vocab_size", "activation", "tie_embeddings",
    "lang_embeddings",
)


@dataclass
class ModelCheckpoint:
    config: object            # ModelConfig
    step: int
    vocab_hash: str
    tensors: dict             # name -> float32 array


def save_checkpoint(path, model, step, vocab_hash):
    tensors = {name: np.asarray(t.data, dtype="<f4")
               for name, t in model.parameters().items()}
    write_raw_checkpoint(path, model.config, step, vocab_hash, tensors)


def write_raw_checkpoint(path, config, step, vocab_hash, tensors):
    block = model_config_text(config, extras={"meta.step": int(step),
                                              "meta.vocab_hash": vocab_hash})
    encoded = block.encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<4sII", FATC_MAGIC, FATC_VERSION, len(encoded)))
        f.write(encoded)
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        head = f.read(12)
        if len(head) < 12:
            raise FormatError(f"{path}: truncated header")
        magic, version, config_len = struct.unpack("<4sII", head)
        if magic != FATC_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != FATC_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        block = f.read(config_len)
        if len(block) != config_len:
            raise FormatError(f"{path}: truncated config block")
        config, extras = model_config_from_text(block.decode("utf-8"))
        count_raw = f.read(4)
        if len(count_raw) != 4:
            raise FormatError(f"{path}: missing tensor count")
        (count,) = struct.unpack("<I", count_raw)
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", f.read(4))
            name = f.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            n_bytes = 4 * int(np.prod(dims, dtype=np.int64)) if ndim else 4
            payload = f.read(n_bytes)
            if len(payload) != n_bytes:
                raise FormatError(f"{path}: truncated payload for tensor {name!r}")
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if "meta.step" not in extras or "meta.vocab_hash" not in extras:
        raise FormatError(f"{path}: config block missing meta fields")
    return ModelCheckpoint(config=config, step=int(extras["meta.step"]),
                           vocab_hash=extras["meta.vocab_hash"].strip(),
                           tensors=tensors)


def build_model(checkpoint, seed=0):
    """Instantiate a model and load the checkpoint's tensors into it."""
    model = FATModel(checkpoint.config, seed=seed)
    model.load_tensors(checkpoint.tensors)
    return model


def _config_diff(a, b):
    names = []
    for f in fields(a):
        if getattr(a, f.name) != getattr(b, f.name):
            names.append(f.name)
    return names


def average_checkpoints(checkpoints):
    """Elementwise arithmetic mean of same-architecture checkpoints.

    The per-element values are sorted before summation, so the result is
    exactly permutation-invariant. Averaging a checkpoint with itself is the
    identity.
    """
    if not checkpoints:
        raise FormatError("average_checkpoints: nothing to average")
    first = checkpoints[0]
    for other in checkpoints[1:]:
        diff = _config_diff(first.config, other.config)
        if diff:
            raise ConfigMismatchError(diff, "cannot average across architectures")
        if other.vocab_hash != first.vocab_hash:
            raise ConfigMismatchError(["vocab_hash"], "cannot average across vocabularies")
        if set(other.tensors) != set(first.tensors):
            raise ConfigMismatchError(["tensors"], "tensor names differ")
    k = len(checkpoints)
    averaged = {}
    for name in first.tensors:
        stack = np.stack([ck.tensors[name] for ck in checkpoints]).astype(np.float64)
        stack.sort(axis=0)
        averaged[name] = (stack.sum(axis=0) / k).astype("<f4")
    return ModelCheckpoint(config=first.config,
                           step=max(ck.step for ck in checkpoints),
                           vocab_hash=first.vocab_hash, tensors=averaged)


def init_from_pretrained(pretrained, st_config, seed=0):
    """Warm-start a translation model from an encoder-pretraining checkpoint.

    Everything the two architectures share by name (embeddings, mask vectors,
    conv downsampler, acoustic and shared transformer stacks, reconstruction
    head, masked-token head) is copied verbatim. Decoder layer i additionally
    inherits its self-attention, feed-forward, and their layer norms from
    shared layer i, plus the final norm; cross-attention blocks, the decoder
    output bias, and the CTC head keep their fresh seed-derived values.

    Returns (model, copied_names). Architecture disagreements raise
    ConfigMismatchError listing the offending fields.
    """
    mismatched = [f for f in _COMPAT_FIELDS
                  if getattr(pretrained.config, f) != getattr(st_config, f)]
    if st_config.dec_layers > st_config.shared_layers:
        mismatched.append("dec_layers")
    if mismatched:
        raise ConfigMismatchError(sorted(set(mismatched)))
    model = FATModel(st_config, seed=seed)
    params = model.parameters()
    copied = []
    for name, arr in pretrained.tensors.items():
        if name in params and params[name].data.shape == arr.shape:
            params[name].data = arr.astype(st_config.dtype)
            copied.append(name)
    remap = {}
    for i in range(st_config.dec_layers):
        for part in ("wq", "wk", "wv", "wo"):
            for leaf in ("w", "b"):
                remap[f"dec.{i}.self.{part}.{leaf}"] = f"shared.{i}.attn.{part}.{leaf}"
        for part in ("fc1", "fc2"):
            for leaf in ("w", "b"):
                remap[f"dec.{i}.ffn.{part}.{leaf}"] = f"shared.{i}.ffn.{part}.{leaf}"
        for leaf in ("g", "b"):
            remap[f"dec.{i}.ln_self.{leaf}"] = f"shared.{i}.ln_attn.{leaf}"
            remap[f"dec.{i}.ln_ffn.{leaf}"] = f"shared.{i}.ln_ffn.{leaf}"
    for leaf in ("g", "b"):
        remap[f"dec.final_ln.{leaf}"] = f"shared.final_ln.{leaf}"
    for dst, src in remap.items():
        if dst in params and src in pretrained.tensors:
            params[dst].data = pretrained.tensors[src].astype(st_config.dtype)
            copied.append(dst)
    return model, sorted(copied)
