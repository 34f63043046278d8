"""Binary container for models, compressed models, networks, data and reconstructions.

Layout (all little-endian):

    4 bytes   magic b"CBCL"
    uint32    format version
    uint64    header length H
    H bytes   UTF-8 JSON header, sorted keys, compact separators
    ...       float64 blocks in the order of header["blocks"] ({"name", "shape"})

Saving a loaded artifact reproduces the file byte for byte.
"""
import json
import logging
import struct
from dataclasses import asdict
from typing import Dict, List, Optional, Tuple

import numpy as np

from compress import CompressedModel, FactorizationReport, FactorizedKernel
from errors import ArtifactError
from slice_model import ImagingSetup, SliceConvModel, SliceKernel
from unrolled_net import UnrolledNet

logger = logging.getLogger(__name__)

MAGIC = b"CBCL"
FORMAT_VERSION = 1
KINDS = ("model", "compressed", "network", "data", "reconstruction")
_PREFIX = struct.Struct("<4sIQ")
_F8 = np.dtype("<f8")


# ---------- Raw container ----------
def _header_bytes(kind: str, meta: dict, blocks: List[Tuple[str, np.ndarray]]) -> bytes:
    if kind not in KINDS:
        raise ArtifactError(f"unknown artifact kind {kind!r}")
    header = dict(meta)
    header["kind"] = kind
    header["format_version"] = FORMAT_VERSION
    header["blocks"] = [{"name": n, "shape": [int(s) for s in np.shape(a)]} for n, a in blocks]
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def header_size(kind: str, meta: dict, blocks: List[Tuple[str, np.ndarray]]) -> int:
    return _PREFIX.size + len(_header_bytes(kind, meta, blocks))


def encode_container(kind: str, meta: dict, blocks: List[Tuple[str, np.ndarray]]) -> bytes:
    hb = _header_bytes(kind, meta, blocks)
    parts = [_PREFIX.pack(MAGIC, FORMAT_VERSION, len(hb)), hb]
    parts.extend(np.ascontiguousarray(a, dtype=_F8).tobytes() for _, a in blocks)
    return b"".join(parts)


def decode_container(data: bytes, source: str = "<bytes>") -> Tuple[dict, Dict[str, np.ndarray]]:
    if len(data) < _PREFIX.size:
        raise ArtifactError(f"{source}: truncated container")
    magic, version, hlen = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise ArtifactError(f"{source}: not a container file (bad magic {magic!r})")
    if version != FORMAT_VERSION:
        raise ArtifactError(f"{source}: unsupported format version {version}")
    start = _PREFIX.size
    if start + hlen > len(data):
        raise ArtifactError(f"{source}: truncated header")
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ArtifactError(f"{source}: corrupt header: {e}")
    pos = start + hlen
    blocks: Dict[str, np.ndarray] = {}
    for entry in header.get("blocks", []):
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * _F8.itemsize
        if pos + n > len(data):
            raise ArtifactError(f"{source}: truncated block {entry['name']!r}")
        if n == 0:
            blocks[entry["name"]] = np.zeros(shape)
        else:
            blocks[entry["name"]] = np.frombuffer(data, dtype=_F8, count=n // _F8.itemsize, offset=pos) \
                .astype(np.float64).reshape(shape)
        pos += n
    if pos != len(data):
        raise ArtifactError(f"{source}: {len(data) - pos} trailing bytes")
    return header, blocks


def write_container(path: str, kind: str, meta: dict, blocks: List[Tuple[str, np.ndarray]]) -> int:
    data = encode_container(kind, meta, blocks)
    with open(path, "wb") as f:
        f.write(data)
    logger.debug("wrote %s artifact %s (%d bytes)", kind, path, len(data))
    return len(data)


def read_container(path: str, expect_kind: Optional[str] = None) -> Tuple[dict, Dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        data = f.read()
    header, blocks = decode_container(data, str(path))
    if expect_kind is not None and header.get("kind") != expect_kind:
        raise ArtifactError(f"{path}: expected a {expect_kind} artifact, found {header.get('kind')!r}")
    return header, blocks


def _setup_from(header: dict, source: str) -> ImagingSetup:
    try:
        return ImagingSetup(**header["setup"])
    except (KeyError, TypeError) as e:
        raise ArtifactError(f"{source}: bad setup in header: {e}")


# ---------- Models ----------
def _model_parts(model: SliceConvModel):
    meta = {
        "setup": asdict(model.setup),
        "slices": [{"slice_offset": s.slice_offset, "stride": s.stride, "padding": s.padding,
                    "input_len": s.input_len, "output_len": s.output_len} for s in model.slices],
    }
    return meta, [(f"slice{s.slice_offset}.weights", s.weights) for s in model.slices]


def save_model(path: str, model: SliceConvModel) -> int:
    meta, blocks = _model_parts(model)
    return write_container(path, "model", meta, blocks)


def model_storage_bytes(model: SliceConvModel, precision: int = 8) -> int:
    meta, blocks = _model_parts(model)
    return header_size("model", meta, blocks) + precision * sum(a.size for _, a in blocks)


def load_model(path: str) -> SliceConvModel:
    header, blocks = read_container(path, "model")
    setup = _setup_from(header, path)
    try:
        slices = [SliceKernel(blocks[f"slice{m['slice_offset']}.weights"], m["stride"], m["padding"],
                              m["input_len"], m["output_len"], m["slice_offset"]) for m in header["slices"]]
    except KeyError as e:
        raise ArtifactError(f"{path}: missing entry {e}")
    return SliceConvModel(setup, slices)


def save_compressed(path: str, cm: CompressedModel) -> int:
    meta = {
        "setup": asdict(cm.setup),
        "method": cm.method,
        "basis": cm.basis,
        "slices": [{"slice_offset": f.slice_offset, "stride": f.stride, "padding": f.padding,
                    "input_len": f.input_len, "output_len": f.output_len, "method": f.method,
                    "num_basis": f.num_basis, "selected_rows": [int(r) for r in f.selected_rows],
                    "degenerate": bool(f.degenerate)} for f in cm.factors],
        "reports": [asdict(r) for r in cm.reports],
    }
    blocks = []
    for f in cm.factors:
        blocks.append((f"slice{f.slice_offset}.basis", f.basis))
        blocks.append((f"slice{f.slice_offset}.mixing", f.mixing))
    return write_container(path, "compressed", meta, blocks)


def load_compressed(path: str) -> CompressedModel:
    header, blocks = read_container(path, "compressed")
    setup = _setup_from(header, path)
    try:
        factors = []
        for m in header["slices"]:
            d = m["slice_offset"]
            factors.append(FactorizedKernel(blocks[f"slice{d}.basis"], blocks[f"slice{d}.mixing"], m["stride"],
                                            m["padding"], m["input_len"], m["output_len"], d,
                                            list(m["selected_rows"]), m["method"], m["degenerate"]))
        reports = [FactorizationReport(**r) for r in header.get("reports", [])]
    except (KeyError, TypeError) as e:
        raise ArtifactError(f"{path}: bad compressed artifact: {e}")
    return CompressedModel(setup, factors, reports, header["method"], header["basis"])


def load_operator_model(path: str):
    """SliceConvModel or CompressedModel, whichever the file holds."""
    with open(path, "rb") as f:
        data = f.read()
    header, _ = decode_container(data, str(path))
    kind = header.get("kind")
    if kind == "model":
        return load_model(path)
    if kind == "compressed":
        return load_compressed(path)
    raise ArtifactError(f"{path}: expected a model or compressed artifact, found {kind!r}")


# ---------- Networks ----------
def _network_parts(net: UnrolledNet):
    meta = {
        "setup": asdict(net.setup),
        "arch": net.arch,
        "num_blocks": net.num_blocks,
        "step": float(net.step),
        "trainable": dict(net.trainable),
        "shared": net.shared,
        "provenance": net.provenance,
        "layout": [asdict(l) for l in net.layout],
    }
    return meta, list(net.params.items())


def network_header_size(net: UnrolledNet) -> int:
    meta, blocks = _network_parts(net)
    return header_size("network", meta, blocks)


def save_network(path: str, net: UnrolledNet) -> int:
    meta, blocks = _network_parts(net)
    return write_container(path, "network", meta, blocks)


def load_network(path: str) -> UnrolledNet:
    header, blocks = read_container(path, "network")
    setup = _setup_from(header, path)
    try:
        return UnrolledNet(header["arch"], header["num_blocks"], setup, dict(blocks), header["step"],
                           header["trainable"], header["shared"], header["provenance"])
    except KeyError as e:
        raise ArtifactError(f"{path}: missing header entry {e}")


# ---------- Data and reconstructions ----------
def save_data(path: str, setup: ImagingSetup, y: np.ndarray, x: Optional[np.ndarray] = None,
              meta: Optional[dict] = None) -> int:
    head = {"setup": asdict(setup), "has_truth": x is not None}
    head.update(meta or {})
    blocks = [("y", np.asarray(y, dtype=np.float64).reshape(setup.cube_shape))]
    if x is not None:
        blocks.append(("x", np.asarray(x, dtype=np.float64).reshape(-1)))
    return write_container(path, "data", head, blocks)


def load_data(path: str) -> Tuple[ImagingSetup, np.ndarray, Optional[np.ndarray], dict]:
    """(setup, flat y, flat x or None, header)."""
    header, blocks = read_container(path, "data")
    setup = _setup_from(header, path)
    if "y" not in blocks:
        raise ArtifactError(f"{path}: data artifact without y block")
    x = blocks.get("x")
    return setup, blocks["y"].reshape(-1), None if x is None else x.reshape(-1), header


def save_reconstruction(path: str, setup: ImagingSetup, x_hat: np.ndarray, meta: Optional[dict] = None) -> int:
    head = {"setup": asdict(setup)}
    head.update(meta or {})
    return write_container(path, "reconstruction", head,
                           [("x_hat", np.asarray(x_hat, dtype=np.float64).reshape(-1))])


def load_reconstruction(path: str) -> Tuple[ImagingSetup, np.ndarray, dict]:
    header, blocks = read_container(path, "reconstruction")
    return _setup_from(header, path), blocks["x_hat"], header
