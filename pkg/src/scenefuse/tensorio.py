"""Bit-exact persistence: raw tensor files and checkpoint directories.

A tensor file is one line of JSON ({"dtype": "f32"|"f64", "shape": [...]})
followed by the raw little-endian row-major payload. Checkpoints are
directories holding one tensor file per parameter, the vocabulary, and a
manifest with content checksums; loads verify every checksum. All writes
go through a temp file and rename, so no output is ever half-written.
"""

import hashlib
import json
import os

import numpy as np

from . import nets, prompts

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}

MANIFEST_NAME = "manifest.json"
VOCAB_NAME = "vocab.txt"


class TensorFormatError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


def _atomic_write(path, data: bytes):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def tensor_bytes(arr):
    """Serialize an array to the tensor file byte format."""
    arr = np.asarray(arr)
    if arr.dtype not in _DTYPE_NAMES:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}; use float32/float64")
    header = json.dumps(
        {"dtype": _DTYPE_NAMES[arr.dtype], "shape": list(arr.shape)},
        separators=(",", ":"),
    )
    payload = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
    return header.encode() + b"\n" + payload


def tensor_from_bytes(data):
    nl = data.find(b"\n")
    if nl < 0:
        raise TensorFormatError("missing header line")
    try:
        header = json.loads(data[:nl].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TensorFormatError(f"bad tensor header: {exc}") from exc
    if not isinstance(header, dict) or "dtype" not in header or "shape" not in header:
        raise TensorFormatError("tensor header needs 'dtype' and 'shape'")
    if header["dtype"] not in _DTYPES:
        raise TensorFormatError(f"unknown dtype {header['dtype']!r}")
    dt = _DTYPES[header["dtype"]]
    shape = header["shape"]
    if not isinstance(shape, list) or not all(isinstance(s, int) and s >= 0 for s in shape):
        raise TensorFormatError(f"bad shape {shape!r}")
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    payload = data[nl + 1:]
    if len(payload) != count * dt.itemsize:
        raise TensorFormatError(
            f"payload is {len(payload)} bytes; shape {shape} needs {count * dt.itemsize}")
    arr = np.frombuffer(payload, dtype=dt).reshape(shape)
    return arr.astype(arr.dtype.newbyteorder("=")).copy()


def save_tensor(path, arr):
    _atomic_write(path, tensor_bytes(arr))


def load_tensor(path):
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(config):
    """Stable hash of a JSON-serializable config."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _tensor_filename(name):
    return name.replace(".", "__") + ".tensor"


def save_checkpoint(dirpath, state, extra_meta=None):
    """Write a ModelState as a self-describing checkpoint directory."""
    os.makedirs(dirpath, exist_ok=True)
    vocab_path = os.path.join(dirpath, VOCAB_NAME)
    _atomic_write(vocab_path, ("\n".join(state.vocab.tokens) + "\n").encode())

    tensors = {}
    for name, arr in state.params.items():
        fname = _tensor_filename(name)
        fpath = os.path.join(dirpath, fname)
        save_tensor(fpath, arr)
        tensors[name] = {
            "file": fname,
            "sha256": sha256_file(fpath),
            "dtype": _DTYPE_NAMES[np.asarray(arr).dtype],
            "shape": list(np.asarray(arr).shape),
        }

    manifest = {
        "format": 1,
        "arch": state.arch,
        "schedule": state.schedule_spec,
        "trainable": list(state.trainable),
        "clip_keys": [list(k) for k in state.clip_keys],
        "vocab_sha256": sha256_file(vocab_path),
        "tensors": tensors,
    }
    if extra_meta:
        manifest["meta"] = extra_meta
    _atomic_write(os.path.join(dirpath, MANIFEST_NAME),
                  json.dumps(manifest, indent=2, sort_keys=True).encode())
    return manifest


def load_checkpoint(dirpath):
    """Load and verify a checkpoint directory into a ModelState."""
    man_path = os.path.join(dirpath, MANIFEST_NAME)
    if not os.path.exists(man_path):
        raise CheckpointError(f"no manifest at {man_path}")
    with open(man_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != 1:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")

    vocab_path = os.path.join(dirpath, VOCAB_NAME)
    got = sha256_file(vocab_path)
    if got != manifest["vocab_sha256"]:
        raise CheckpointError(f"vocabulary checksum mismatch in {dirpath}")
    vocab = prompts.Vocabulary.load(vocab_path)

    params = {}
    for name, entry in manifest["tensors"].items():
        fpath = os.path.join(dirpath, entry["file"])
        if not os.path.exists(fpath):
            raise CheckpointError(f"missing tensor file {entry['file']}")
        got = sha256_file(fpath)
        if got != entry["sha256"]:
            raise CheckpointError(
                f"checksum mismatch for {entry['file']}: {got} != {entry['sha256']}")
        arr = load_tensor(fpath)
        if list(arr.shape) != entry["shape"]:
            raise CheckpointError(
                f"shape mismatch for {name}: {list(arr.shape)} != {entry['shape']}")
        params[name] = arr

    state = nets.ModelState(
        params,
        tuple(manifest["trainable"]),
        manifest["arch"],
        vocab,
        manifest["schedule"],
        [tuple(k) for k in manifest["clip_keys"]],
    )
    return state


def write_json(path, obj):
    _atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def write_jsonl(path, rows):
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)
    _atomic_write(path, text.encode())


def write_ppm(path, image):
    """8-bit binary PPM dump of an image in [0, 1] for eyeballing."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise TensorFormatError(f"PPM needs an (H, W, 3) image, got {img.shape}")
    h, w, _ = img.shape
    data = (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    _atomic_write(path, f"P6\n{w} {h}\n255\n".encode() + data.tobytes())
