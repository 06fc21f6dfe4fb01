"""Model and dataset files.

Binary container layout (little endian)::

    magic    8 bytes   b"FENODEM\\0" (model) or b"FENODED\\0" (dataset)
    version  uint32
    hlen     uint64    length of the JSON header
    header   hlen bytes, UTF-8 JSON with sorted keys; "arrays" lists [name, shape]
    payload  the listed arrays as float64, in order

No timestamps or other run-dependent bytes are written, so saving the same
object twice yields identical files.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .data import Normalizer, TrajectoryDataset
from .encoder import EncoderModel
from .errors import ConfigError, CorruptFileError, VersionMismatchError

MODEL_MAGIC = b"FENODEM\x00"
DATASET_MAGIC = b"FENODED\x00"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def _pack(magic: bytes, header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    header = dict(header)
    header["arrays"] = [[name, list(a.shape)] for name, a in arrays.items()]
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())
    return _PREFIX.pack(magic, FORMAT_VERSION, len(hbytes)) + hbytes + body


def _unpack(magic: bytes, blob: bytes, path) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < _PREFIX.size:
        raise CorruptFileError(f"{path}: truncated file")
    found_magic, version, hlen = _PREFIX.unpack_from(blob)
    if found_magic != magic:
        raise CorruptFileError(f"{path}: wrong magic header {found_magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(version, FORMAT_VERSION)
    start = _PREFIX.size
    if len(blob) < start + hlen:
        raise CorruptFileError(f"{path}: truncated header")
    try:
        header = json.loads(blob[start:start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CorruptFileError(f"{path}: unreadable header") from err
    off = start + hlen
    arrays = {}
    for name, shape in header.pop("arrays"):
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if len(blob) < off + nbytes:
            raise CorruptFileError(f"{path}: truncated payload")
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=off).reshape(shape).astype(np.float64)
        off += nbytes
    if off != len(blob):
        raise CorruptFileError(f"{path}: trailing bytes after payload")
    return header, arrays


def model_to_bytes(model: EncoderModel) -> bytes:
    if model.avg_field is not None:
        raise ConfigError("models with a fixed analytic average function cannot be saved")
    n = model.normalizer
    header = {
        "kind": "encoder_model",
        "mode": model.mode,
        "state_dim": model.state_dim,
        "control_dim": model.control_dim,
        "hidden_sizes": list(model.hidden_sizes),
        "k": model.k,
        "hidden_dim": model.hidden_dim,
        "volume": model.volume,
        "config": model.config,
    }
    arrays = {"basis": model.basis}
    if model.avg is not None:
        arrays["avg"] = model.avg
    arrays.update({
        "state_mean": n.state_mean, "state_std": n.state_std,
        "control_mean": n.control_mean, "control_std": n.control_std,
        "hidden_mean": n.hidden_mean, "hidden_std": n.hidden_std, "input_gain": n.input_gain,
    })
    return _pack(MODEL_MAGIC, header, arrays)


def model_from_bytes(blob: bytes, path="<bytes>") -> EncoderModel:
    h, a = _unpack(MODEL_MAGIC, blob, path)
    norm = Normalizer(a["state_mean"], a["state_std"], a["control_mean"], a["control_std"],
                      a["hidden_mean"], a["hidden_std"], a["input_gain"])
    return EncoderModel(h["mode"], h["state_dim"], h["control_dim"], tuple(h["hidden_sizes"]),
                        a["basis"], norm, a.get("avg"), h["hidden_dim"], h["volume"], h["config"])


def save_model(model: EncoderModel, path) -> Path:
    path = Path(path)
    path.write_bytes(model_to_bytes(model))
    return path


def load_model(path) -> EncoderModel:
    return model_from_bytes(Path(path).read_bytes(), path)


def dataset_to_bytes(d: TrajectoryDataset) -> bytes:
    header = {"kind": "trajectory_dataset", "family": d.family, "hidden": d.hidden,
              "state_dim": d.state_dim, "control_dim": d.control_dim}
    return _pack(DATASET_MAGIC, header, {"states": d.states, "controls": d.controls,
                                         "next_states": d.next_states, "dts": d.dts})


def dataset_from_bytes(blob: bytes, path="<bytes>") -> TrajectoryDataset:
    h, a = _unpack(DATASET_MAGIC, blob, path)
    return TrajectoryDataset(a["states"], a["controls"].reshape(len(a["dts"]), h["control_dim"]),
                             a["next_states"], a["dts"], h["family"], h["hidden"])


def save_dataset(d: TrajectoryDataset, path) -> Path:
    path = Path(path)
    if path.suffix == ".csv":
        write_dataset_csv(d, path)
    else:
        path.write_bytes(dataset_to_bytes(d))
    return path


def load_dataset(path) -> TrajectoryDataset:
    path = Path(path)
    if path.suffix == ".csv":
        return read_dataset_csv(path)
    return dataset_from_bytes(path.read_bytes(), path)


def write_dataset_csv(d: TrajectoryDataset, path) -> None:
    n, p = d.state_dim, d.control_dim
    with open(path, "w", newline="") as fh:
        fh.write(f"# family={d.family}\n")
        fh.write(f"# hidden={json.dumps(d.hidden, sort_keys=True)}\n")
        fh.write(f"# dims n={n} p={p}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(n)] + [f"u{i}" for i in range(p)]
                   + [f"next_x{i}" for i in range(n)] + ["dt"])
        for row in np.hstack([d.states, d.controls, d.next_states, d.dts[:, None]]):
            w.writerow([repr(float(v)) for v in row])


def read_dataset_csv(path) -> TrajectoryDataset:
    meta = {}
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key] = value
            if key.startswith("dims"):
                parts = dict(tok.split("=") for tok in line[1:].split()[1:])
                meta["n"], meta["p"] = int(parts["n"]), int(parts["p"])
        else:
            body.append(line)
    if "n" not in meta:
        raise CorruptFileError(f"{path}: missing '# dims' header line")
    rows = list(csv.reader(body))[1:]
    n, p = meta["n"], meta["p"]
    arr = np.array([[float(v) for v in r] for r in rows], dtype=np.float64).reshape(len(rows), 2 * n + p + 1)
    return TrajectoryDataset(arr[:, :n], arr[:, n:n + p], arr[:, n + p:2 * n + p], arr[:, -1],
                             meta.get("family", ""), json.loads(meta.get("hidden", "{}")))


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, columns, rows, config_hash: str = "") -> Path:
    """CSV with a ``# config_sha256=`` provenance line, a header row and repr floats."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_sha256={config_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r[c]) for c in columns] if isinstance(r, dict) else [_cell(v) for v in r])
    return path


def read_csv(path) -> tuple[str, list[dict]]:
    """Inverse of :func:`write_csv`: ``(config_hash, rows as string dicts)``."""
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# config_sha256="):
            raise CorruptFileError(f"{path}: missing config hash line")
        return first.strip().split("=", 1)[1], list(csv.DictReader(fh))
