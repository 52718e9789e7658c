"""File formats: volumes, landmarks, model checkpoints, run configs.

Volumes use a MetaImage-style text header (key = value lines) next to a
raw little- or big-endian payload in x-fastest index order; bare raw
files with geometry given on the side are supported for datasets that
ship without headers.  Landmarks are whitespace-separated index
triples, one per line.  Checkpoints are a small binary container:
magic, a JSON config block, then float64 little-endian parameter
arrays, written canonically so equal models produce equal bytes.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError, DataError
from .loss import LossConfig
from .energy import EnergyParams
from .net import DeformationModel, NetConfig, NormTransform
from .opt import TrainConfig, resolve_preset
from .volume import Volume

_ELEMENT_TYPES = {
    "MET_SHORT": np.int16,
    "MET_USHORT": np.uint16,
    "MET_FLOAT": np.float32,
}
_TYPE_NAMES = {"int16": "MET_SHORT", "uint16": "MET_USHORT", "float32": "MET_FLOAT"}

CHECKPOINT_MAGIC = b"CREGMDL1"


# -- volumes ----------------------------------------------------------------


def _parse_header(path: Path):
    fields = {}
    header_end = 0
    with open(path, "rb") as fh:
        for raw in fh:
            header_end += len(raw)
            line = raw.decode("ascii", errors="replace").strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}: malformed header line {line!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            fields[key] = val
            if key == "ElementDataFile":
                break
        else:
            raise DataError(f"{path}: header has no ElementDataFile")
    return fields, header_end


def read_volume(path) -> Volume:
    """Read a header + raw volume.  ElementDataFile may name a sibling
    file or be LOCAL with the payload inline after the header."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such volume: {path}")
    fields, header_end = _parse_header(path)

    ndims = fields.get("NDims", "3")
    if ndims.strip() != "3":
        raise DataError(f"{path}: NDims must be 3, got {ndims}")
    if fields.get("CompressedData", "False").lower() == "true":
        raise DataError(f"{path}: compressed payloads are not supported")
    try:
        dims = [int(x) for x in fields["DimSize"].split()]
        spacing = [float(x) for x in fields.get("ElementSpacing", "1 1 1").split()]
        origin = [float(x) for x in fields.get("Offset", "0 0 0").split()]
    except KeyError as k:
        raise DataError(f"{path}: missing header key {k}") from None
    except ValueError as v:
        raise DataError(f"{path}: bad header value ({v})") from None
    if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
        raise DataError(f"{path}: DimSize/ElementSpacing/Offset must have 3 entries")

    etype = fields.get("ElementType")
    if etype not in _ELEMENT_TYPES:
        raise DataError(f"{path}: unsupported ElementType {etype!r} "
                        f"(supported: {sorted(_ELEMENT_TYPES)})")
    msb = fields.get("BinaryDataByteOrderMSB", "False").lower() == "true"
    dtype = np.dtype(_ELEMENT_TYPES[etype]).newbyteorder(">" if msb else "<")

    datafile = fields["ElementDataFile"]
    count = dims[0] * dims[1] * dims[2]
    if datafile == "LOCAL":
        with open(path, "rb") as fh:
            fh.seek(header_end)
            payload = fh.read()
    else:
        datapath = path.parent / datafile
        if not datapath.exists():
            raise DataError(f"{path}: data file {datapath} not found")
        payload = datapath.read_bytes()
    expected = count * dtype.itemsize
    if len(payload) < expected:
        raise DataError(f"{path}: payload has {len(payload)} bytes, need {expected}")
    flat = np.frombuffer(payload[:expected], dtype=dtype)
    data = flat.reshape(dims[2], dims[1], dims[0]).transpose(2, 1, 0)
    return Volume(np.ascontiguousarray(data, dtype=np.float64), spacing, origin)


def read_raw_volume(path, dims, element_type: str, spacing=(1, 1, 1),
                    origin=(0, 0, 0), byte_order_msb=False) -> Volume:
    """Read a headerless raw payload (x-fastest order) with explicit
    geometry; the escape hatch for datasets shipped as bare .img."""
    path = Path(path)
    if element_type not in _TYPE_NAMES:
        raise ConfigError(f"element_type must be one of {sorted(_TYPE_NAMES)}")
    dtype = np.dtype(_ELEMENT_TYPES[_TYPE_NAMES[element_type]]).newbyteorder(
        ">" if byte_order_msb else "<")
    dims = [int(d) for d in dims]
    count = dims[0] * dims[1] * dims[2]
    payload = path.read_bytes()
    if len(payload) < count * dtype.itemsize:
        raise DataError(f"{path}: payload has {len(payload)} bytes, "
                        f"need {count * dtype.itemsize}")
    flat = np.frombuffer(payload[: count * dtype.itemsize], dtype=dtype)
    data = flat.reshape(dims[2], dims[1], dims[0]).transpose(2, 1, 0)
    return Volume(np.ascontiguousarray(data, dtype=np.float64), spacing, origin)


def write_volume(vol: Volume, path, element_type: str = "float32",
                 byte_order_msb: bool = False):
    """Write header + raw pair.  A .mha suffix stores the payload inline
    (ElementDataFile = LOCAL); anything else writes a sibling .raw."""
    path = Path(path)
    if element_type not in _TYPE_NAMES:
        raise ConfigError(f"element_type must be one of {sorted(_TYPE_NAMES)}")
    met = _TYPE_NAMES[element_type]
    dtype = np.dtype(_ELEMENT_TYPES[met]).newbyteorder(">" if byte_order_msb else "<")
    data = vol.data.transpose(2, 1, 0)
    if element_type != "float32":
        data = np.rint(data)
    payload = np.ascontiguousarray(data.astype(dtype)).tobytes()

    inline = path.suffix == ".mha"
    datafile = "LOCAL" if inline else path.with_suffix(".raw").name
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        f"BinaryDataByteOrderMSB = {byte_order_msb}",
        f"DimSize = {vol.dims[0]} {vol.dims[1]} {vol.dims[2]}",
        f"ElementSpacing = {vol.spacing[0]:.17g} {vol.spacing[1]:.17g} {vol.spacing[2]:.17g}",
        f"Offset = {vol.origin[0]:.17g} {vol.origin[1]:.17g} {vol.origin[2]:.17g}",
        f"ElementType = {met}",
        f"ElementDataFile = {datafile}",
    ]
    header = ("\n".join(lines) + "\n").encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        if inline:
            fh.write(payload)
    if not inline:
        (path.parent / datafile).write_bytes(payload)


# -- landmarks ----------------------------------------------------------------


def read_landmarks(path) -> np.ndarray:
    """Whitespace-separated voxel-index triples, one landmark per line.
    Blank lines are skipped; anything else is a DataError naming the line."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such landmark file: {path}")
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        s = line.strip()
        if not s:
            continue
        parts = s.split()
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 values, got {len(parts)}")
        try:
            rows.append([float(x) for x in parts])
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric value in {s!r}") from None
    if not rows:
        raise DataError(f"{path}: no landmarks found")
    return np.asarray(rows, dtype=np.float64)


def write_landmarks(points: np.ndarray, path):
    points = np.atleast_2d(points)
    with open(path, "w") as fh:
        for p in points:
            fh.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")


# -- checkpoints ----------------------------------------------------------------


def save_model(model: DeformationModel, path):
    """Serialise config + normalisation + parameters.

    Equal models serialise to equal bytes: the JSON block is written
    with sorted keys and the arrays as raw little-endian float64, which
    is what makes bitwise checkpoint comparison meaningful.
    """
    cfg = model.cfg
    header = {
        "format": 1,
        "net": {
            "layers": cfg.layers, "hidden": cfg.hidden, "omega": cfg.omega,
            "encoder": cfg.encoder, "fourier_features": cfg.fourier_features,
            "fourier_sigma": cfg.fourier_sigma,
        },
        "norm": {
            "center": [float(x) for x in model.norm.center],
            "half_extent": [float(x) for x in model.norm.half_extent],
        },
        "has_fourier": model.fourier_b is not None,
        "shapes": [[list(w.shape), list(b.shape)] for w, b in model.layers],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("ascii")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(np.array(len(blob), dtype="<u4").tobytes())
        fh.write(blob)
        if model.fourier_b is not None:
            fh.write(np.ascontiguousarray(model.fourier_b, dtype="<f8").tobytes())
        for w, b in model.layers:
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_model(path) -> DeformationModel:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such checkpoint: {path}")
    raw = path.read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a model checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    (blob_len,) = np.frombuffer(raw[off : off + 4], dtype="<u4")
    off += 4
    try:
        header = json.loads(raw[off : off + int(blob_len)].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: corrupt checkpoint header ({e})") from None
    off += int(blob_len)

    cfg = NetConfig(**header["net"])
    norm = NormTransform(
        center=np.asarray(header["norm"]["center"], dtype=np.float64),
        half_extent=np.asarray(header["norm"]["half_extent"], dtype=np.float64),
    )
    model = DeformationModel(cfg, norm, seed=0)

    def take(shape):
        nonlocal off
        n = int(np.prod(shape)) if shape else 1
        end = off + 8 * n
        if end > len(raw):
            raise DataError(f"{path}: checkpoint truncated")
        arr = np.frombuffer(raw[off:end], dtype="<f8").reshape(shape)
        off = end
        return np.ascontiguousarray(arr)

    if header["has_fourier"]:
        model.fourier_b = take((cfg.fourier_features, 3))
    params = []
    for wshape, bshape in header["shapes"]:
        params.append(take(tuple(wshape)))
        params.append(take(tuple(bshape)))
    model.set_parameters(params)
    if off != len(raw):
        raise DataError(f"{path}: {len(raw) - off} trailing bytes in checkpoint")
    return model


# -- run configuration ----------------------------------------------------------


_SECTION_FIELDS = {
    "net": set(NetConfig.__dataclass_fields__),
    "loss": set(LossConfig.__dataclass_fields__) - {"energy"},
    "train": set(TrainConfig.__dataclass_fields__),
    "energy": set(EnergyParams.__dataclass_fields__),
}


def read_config(path):
    """Parse a TOML run config into (NetConfig, LossConfig, TrainConfig).

    Layout: optional top-level `preset = "small-motion"` applied first,
    then [net]/[loss]/[train]/[energy] tables override individual keys.
    Unknown keys or sections raise ConfigError rather than being
    silently dropped.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no such config file: {path}")
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None

    net_kw, train_kw = {}, {}
    preset = doc.pop("preset", None)
    if preset is not None:
        net_cfg, train_cfg = resolve_preset(preset)
        net_kw = {k: getattr(net_cfg, k) for k in _SECTION_FIELDS["net"]}
        train_kw = {k: getattr(train_cfg, k) for k in _SECTION_FIELDS["train"]}

    loss_kw, energy_kw = {}, {}
    sink = {"net": net_kw, "loss": loss_kw, "train": train_kw, "energy": energy_kw}
    for section, table in doc.items():
        if section not in sink:
            raise ConfigError(f"{path}: unknown section [{section}]")
        if not isinstance(table, dict):
            raise ConfigError(f"{path}: {section} must be a table")
        allowed = _SECTION_FIELDS[section]
        for key, val in table.items():
            if key not in allowed:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            sink[section][key] = val

    try:
        net = NetConfig(**net_kw)
        energy = EnergyParams(**energy_kw)
        lossc = LossConfig(energy=energy, **loss_kw)
        train = TrainConfig(**train_kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from None
    return net, lossc, train


def write_log(log, path):
    """Training log as CSV: epoch, similarity, reg, total."""
    with open(path, "w") as fh:
        fh.write("epoch,similarity,reg,total\n")
        for r in log:
            fh.write(f"{r.epoch},{r.similarity:.17g},{r.reg:.17g},{r.total:.17g}\n")


def read_log(path):
    """Inverse of write_log; returns a list of (epoch, sim, reg, total)."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "epoch,similarity,reg,total":
        raise DataError(f"{path}: not a training log")
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected 4 columns")
        out.append((int(parts[0]), float(parts[1]), float(parts[2]), float(parts[3])))
    return out
