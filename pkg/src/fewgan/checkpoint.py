"""Single-file checkpoint container.

Layout (little endian)::

    magic b"FEWGANCK" | u16 version | u32 section count
    per section: u16 name length | name (utf-8) | u64 payload length
                 | payload | u32 crc32(payload)

Sections are ``meta`` (JSON), ``model`` and optionally ``prior`` (tensor
blobs: u64 header length, JSON header with name/dtype/shape/offset per
tensor, then the raw row-major bytes).
"""

import hashlib
import io
import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch

from fewgan import config as config_lib
from fewgan.generators import PyramidModel
from fewgan.prior import PixelCNNPrior

MAGIC = b"FEWGANCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CodebookMismatchError(CheckpointError):
    pass


def _tensors_to_bytes(state):
    header = []
    chunks = []
    offset = 0
    for name, tensor in state.items():
        arr = tensor.detach().cpu().contiguous().numpy()
        raw = arr.tobytes()
        header.append({"name": name, "dtype": arr.dtype.str,
                       "shape": list(arr.shape), "offset": offset,
                       "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    head = json.dumps(header).encode()
    return struct.pack("<Q", len(head)) + head + b"".join(chunks)


def _tensors_from_bytes(blob):
    (n,) = struct.unpack_from("<Q", blob, 0)
    header = json.loads(blob[8:8 + n])
    body = memoryview(blob)[8 + n:]
    state = {}
    for entry in header:
        raw = body[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy())
    return state


def parameter_hash(*modules):
    """SHA-256 over the names and raw bytes of all parameters and buffers."""
    h = hashlib.sha256()
    for module in modules:
        for name, tensor in module.state_dict().items():
            h.update(name.encode())
            h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _write_container(path, sections):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(sections)))
    for name, payload in sections.items():
        encoded = name.encode()
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<Q", len(payload)))
        buf.write(payload)
        buf.write(struct.pack("<I", zlib.crc32(payload)))
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(buf.getvalue())
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_container(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        pos = len(MAGIC)
        version, count = struct.unpack_from("<HI", data, pos)
        pos += 6
        if version != VERSION:
            raise UnsupportedVersionError(
                f"{path}: unsupported checkpoint version {version} "
                f"(supported: {VERSION})"
            )
        sections = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + n].decode()
            pos += n
            (length,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            payload = data[pos:pos + length]
            pos += length
            (crc,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if len(payload) != length or zlib.crc32(payload) != crc:
                raise CorruptCheckpointError(f"{path}: section {name!r} is corrupt")
            sections[name] = payload
    except (struct.error, UnicodeDecodeError) as e:
        raise CorruptCheckpointError(f"{path}: truncated or corrupt ({e})") from e
    if pos != len(data):
        raise CorruptCheckpointError(f"{path}: trailing bytes after last section")
    return sections


def build_model(cfg, sizes):
    return PyramidModel(
        sizes, n_embeddings=cfg.n_embeddings, n_z=cfg.n_z,
        lambda_pos=cfg.lambda_pos, ae_channels=cfg.ae_channels,
        gan_channels=cfg.gan_channels, gan_layers=cfg.gan_layers,
    )


def build_prior(cfg):
    return PixelCNNPrior(cfg.n_embeddings, channels=cfg.prior_channels,
                         n_blocks=cfg.prior_blocks)


@dataclass
class Checkpoint:
    config: config_lib.TrainConfig
    model: PyramidModel
    prior: PixelCNNPrior | None = None
    # completed_scales, prior_trained, ...
    status: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt):
    """Atomically writes ``ckpt`` to ``path`` (temp file, then rename)."""
    model = ckpt.model
    meta = {
        "config": ckpt.config.to_dict(),
        "sizes": [list(s) for s in model.sizes],
        "status": ckpt.status,
        "codebook_tag": model.codebook.tag(),
        "prior_codebook_tag": None,
    }
    sections = {"model": _tensors_to_bytes(model.state_dict())}
    if ckpt.prior is not None:
        meta["prior_codebook_tag"] = ckpt.prior.codebook_tag
        sections["prior"] = _tensors_to_bytes(ckpt.prior.state_dict())
    sections = {"meta": json.dumps(meta, sort_keys=True).encode(), **sections}
    _write_container(path, sections)


def load_checkpoint(path):
    """Reads a checkpoint written by :func:`save_checkpoint`.

    Raises:
        UnsupportedVersionError: The container version is not supported.
        CorruptCheckpointError: The file is truncated or fails its checksums.
        CodebookMismatchError: The stored prior was trained against a
            different codebook than the stored model holds.
    """
    sections = _read_container(path)
    if "meta" not in sections or "model" not in sections:
        raise CorruptCheckpointError(f"{path}: missing meta or model section")
    meta = json.loads(sections["meta"])
    cfg = config_lib.TrainConfig.from_dict(meta["config"])
    model = build_model(cfg, [tuple(s) for s in meta["sizes"]])
    model.load_state_dict(_tensors_from_bytes(sections["model"]))
    model.completed_scales = meta.get("status", {}).get("completed_scales", 0)
    if model.codebook.tag() != meta["codebook_tag"]:
        raise CorruptCheckpointError(f"{path}: codebook does not match its tag")
    prior = None
    if "prior" in sections:
        tag = meta.get("prior_codebook_tag")
        if tag != meta["codebook_tag"]:
            raise CodebookMismatchError(
                f"{path}: prior was trained against codebook {tag}, "
                f"checkpoint holds codebook {meta['codebook_tag']}"
            )
        prior = build_prior(cfg)
        prior.load_state_dict(_tensors_from_bytes(sections["prior"]))
        prior.codebook_tag = tag
        prior.eval()
    model.eval()
    return Checkpoint(cfg, model, prior, meta.get("status", {}))
