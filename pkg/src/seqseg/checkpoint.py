"""Versioned binary checkpoint container.

Layout (little-endian)::

    magic b"SCKP" | version u16 | reserved u16 | manifest length u32
    manifest (UTF-8 JSON)
    section payloads, each a run of f64 arrays in manifest order

The manifest records the layer schedule, seed, batch-norm constants, the
training configuration and loss history, and for every section its byte
offset, length, CRC32 and array shapes. Offsets are relative to the end of
the manifest.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .birnn import BiRNNParams, CLSTMParams
from .pnet import PNetParams, upsampler_geometry
from .synthdata import FormatError
from .tensor import BN_EPS, BN_MOMENTUM, Tensor

MAGIC = b"SCKP"
VERSION = 1
_PREFIX = struct.Struct("<4sHHI")


class CheckpointFormatError(FormatError):
    def __init__(self, message: str, offset: int, section: str | None = None):
        where = f"section {section!r}: " if section else ""
        super().__init__(where + message, offset)
        self.section = section


def _pnet_arrays(p: PNetParams) -> list[tuple[str, np.ndarray]]:
    arrays = [(n, t.data) for n, t in p.parameters()]
    return arrays + p.buffers()


def _birnn_arrays(b: BiRNNParams) -> list[tuple[str, np.ndarray]]:
    return [(n, t.data) for n, t in b.parameters()]


def _pack(name: str, arrays, offset: int) -> tuple[dict, bytes]:
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    meta = {"name": name, "offset": offset, "length": len(payload),
            "crc32": zlib.crc32(payload) & 0xFFFFFFFF,
            "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays]}
    return meta, payload


def encode(checkpoint) -> bytes:
    p = checkpoint.pnet
    sections, payloads, offset = [], [], 0
    items = [("pnet", _pnet_arrays(p))]
    if checkpoint.birnn is not None:
        items.append(("birnn", _birnn_arrays(checkpoint.birnn)))
    for name, arrays in items:
        meta, payload = _pack(name, arrays, offset)
        sections.append(meta)
        payloads.append(payload)
        offset += len(payload)
    manifest = {
        "format": VERSION,
        "layer_schedule": {
            "K": p.K, "width": p.width, "agg_channels": p.agg_channels, "in_channels": p.in_channels,
            "conv": {"kernel": 3, "stride": 1, "pad": 1}, "pool": {"kernel": 2, "stride": 2},
            "upsamplers": [list(upsampler_geometry(j)) for j in range(1, p.K + 1)],
        },
        "seed": p.seed,
        "batchnorm": {"eps": BN_EPS, "momentum": BN_MOMENTUM},
        "config": checkpoint.config.to_dict(),
        "stage": checkpoint.stage,
        "epoch": checkpoint.epoch,
        "history": [list(r) for r in checkpoint.history],
        "meta": checkpoint.meta,
        "sections": sections,
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, 0, len(mbytes)) + mbytes + b"".join(payloads)


def _read_section(raw: bytes, base: int, meta: dict) -> dict[str, np.ndarray]:
    name = meta["name"]
    start = base + meta["offset"]
    end = start + meta["length"]
    if end > len(raw):
        raise CheckpointFormatError(f"truncated: needs bytes up to {end}, file has {len(raw)}", len(raw), name)
    payload = raw[start:end]
    if zlib.crc32(payload) & 0xFFFFFFFF != meta["crc32"]:
        raise CheckpointFormatError("checksum mismatch", start, name)
    out, pos = {}, 0
    for a in meta["arrays"]:
        n = int(np.prod(a["shape"])) if a["shape"] else 1
        if pos + 8 * n > len(payload):
            raise CheckpointFormatError(f"array {a['name']!r} overruns the section", start + pos, name)
        out[a["name"]] = np.frombuffer(payload, dtype="<f8", count=n, offset=pos).reshape(a["shape"]).astype(np.float64)
        pos += 8 * n
    if pos != len(payload):
        raise CheckpointFormatError(f"{len(payload) - pos} unread bytes", start + pos, name)
    return out


def _fill_pnet(p: PNetParams, arrays: dict[str, np.ndarray]) -> None:
    for name, target in _pnet_arrays(p):
        if name not in arrays:
            raise CheckpointFormatError(f"missing array {name!r}", 0, "pnet")
        src = arrays[name]
        if src.shape != target.shape:
            raise CheckpointFormatError(f"array {name!r} has shape {src.shape}, expected {target.shape}", 0, "pnet")
        target[...] = src


def _build_birnn(arrays: dict[str, np.ndarray]) -> BiRNNParams:
    def clstm(prefix):
        try:
            return CLSTMParams(*(Tensor(arrays[f"{prefix}.{k}"], True) for k in ("kernels", "peephole", "bias")))
        except KeyError as e:
            raise CheckpointFormatError(f"missing array {e.args[0]!r}", 0, "birnn") from None

    b = BiRNNParams(clstm("birnn.backward"), clstm("birnn.forward"), Tensor(arrays["birnn.mix_logits"], True))
    b.parameters()
    return b


def decode(raw: bytes):
    from .trainer import Checkpoint, TrainConfig

    if len(raw) < _PREFIX.size:
        raise CheckpointFormatError("file shorter than the container prefix", len(raw), "header")
    magic, version, _, mlen = _PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}", 0, "header")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}", 4, "header")
    base = _PREFIX.size + mlen
    if base > len(raw):
        raise CheckpointFormatError("truncated manifest", len(raw), "manifest")
    try:
        manifest = json.loads(raw[_PREFIX.size:base].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"unreadable manifest ({e})", _PREFIX.size, "manifest") from None
    if manifest.get("format") != VERSION:
        raise CheckpointFormatError(f"manifest format {manifest.get('format')} != {VERSION}", _PREFIX.size, "manifest")
    sched = manifest["layer_schedule"]
    sections = {s["name"]: s for s in manifest["sections"]}
    if "pnet" not in sections:
        raise CheckpointFormatError("no pnet section", _PREFIX.size, "manifest")
    pnet = PNetParams.create(sched["K"], sched["width"], sched["agg_channels"], sched["in_channels"],
                             seed=manifest["seed"])
    _fill_pnet(pnet, _read_section(raw, base, sections["pnet"]))
    birnn = None
    if "birnn" in sections:
        birnn = _build_birnn(_read_section(raw, base, sections["birnn"]))
    end = base + sum(s["length"] for s in manifest["sections"])
    if end != len(raw):
        raise CheckpointFormatError(f"{len(raw) - end} trailing bytes", end, "trailer")
    return Checkpoint(pnet=pnet, birnn=birnn, config=TrainConfig.from_dict(manifest["config"]),
                      stage=manifest["stage"], epoch=manifest["epoch"],
                      history=[tuple(r) for r in manifest["history"]], meta=manifest.get("meta", {}))


def save_checkpoint(path, checkpoint) -> None:
    Path(path).write_bytes(encode(checkpoint))


def load_checkpoint(path):
    return decode(Path(path).read_bytes())
