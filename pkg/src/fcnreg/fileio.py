"""Volume, label, field and checkpoint file formats, plus the config syntax.

Formats:

* NIfTI-1, single-file ``n+1`` only, datatypes uint8/int16/float32, either
  endianness on read; always float32 little-endian on write.  Deformation
  fields are stored as 4D volumes with the 3 displacement components in the
  4th dimension.
* Headerless raw float32 (W fastest) with a ``<path>.dims`` sidecar.
* Checkpoints: magic ``FCNR``, u32 version, u32 flags (bit0: Adam state
  present), length-prefixed config text, then length-prefixed named float32
  tensors.  Everything little-endian; round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .layers import BNParams, ConvParams
from .network import RegNetParams, layer_table
from .volume import LabelVolume, Volume
from .warp import DeformationField


class FileFormatError(ValueError):
    """A file failed validation: wrong magic, bad metadata, or truncation."""


_NIFTI_DTYPES = {2: np.dtype("u1"), 4: np.dtype("<i2"), 16: np.dtype("<f4")}
_HDR_SIZE = 348
_PAYLOAD_OFFSET = 352


def _nifti_header(dims, n_components: int, spacing) -> bytes:
    hdr = bytearray(_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    D, H, W = dims
    ndim = 4 if n_components > 1 else 3
    dim = [ndim, W, H, D, n_components, 1, 1, 1]
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 70, 16)  # float32
    struct.pack_into("<h", hdr, 72, 32)  # bitpix
    sp = (1.0, 1.0, 1.0) if spacing is None else spacing
    pixdim = [1.0, float(sp[2]), float(sp[1]), float(sp[0]), 1.0, 1.0, 1.0, 1.0]
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, float(_PAYLOAD_OFFSET))
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)  # scl_inter
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr)


def write_nifti(obj, path) -> None:
    """Write a Volume, LabelVolume or DeformationField as float32 NIfTI-1."""
    if isinstance(obj, Volume):
        data = np.ascontiguousarray(obj.data, dtype="<f4")
        hdr = _nifti_header(obj.dims, 1, obj.spacing)
    elif isinstance(obj, LabelVolume):
        data = np.ascontiguousarray(obj.data, dtype="<f4")
        hdr = _nifti_header(obj.dims, 1, None)
    elif isinstance(obj, DeformationField):
        data = np.ascontiguousarray(obj.disp, dtype="<f4")
        hdr = _nifti_header(obj.dims, 3, None)
    else:
        raise TypeError(f"cannot write {type(obj).__name__} as NIfTI")
    with open(path, "wb") as fh:
        fh.write(hdr)
        fh.write(b"\x00" * (_PAYLOAD_OFFSET - _HDR_SIZE))
        fh.write(data.tobytes())


def _parse_nifti(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HDR_SIZE:
        raise FileFormatError(f"{path}: truncated NIfTI header ({len(raw)} bytes)")
    (size_le,) = struct.unpack_from("<i", raw, 0)
    (size_be,) = struct.unpack_from(">i", raw, 0)
    if size_le == _HDR_SIZE:
        bo = "<"
    elif size_be == _HDR_SIZE:
        bo = ">"
    else:
        raise FileFormatError(f"{path}: not a NIfTI-1 file (header size field "
                              f"is {size_le}, expected {_HDR_SIZE})")
    magic = raw[344:348]
    if magic == b"ni1\x00":
        raise FileFormatError(f"{path}: dual-file NIfTI ('ni1') is unsupported; "
                              "only single-file 'n+1' is handled")
    if magic != b"n+1\x00":
        raise FileFormatError(f"{path}: wrong NIfTI magic {magic!r}")
    dim = struct.unpack_from(f"{bo}8h", raw, 40)
    (datatype,) = struct.unpack_from(f"{bo}h", raw, 70)
    pixdim = struct.unpack_from(f"{bo}8f", raw, 76)
    (vox_offset,) = struct.unpack_from(f"{bo}f", raw, 108)
    (scl_slope,) = struct.unpack_from(f"{bo}f", raw, 112)
    (scl_inter,) = struct.unpack_from(f"{bo}f", raw, 116)
    if datatype not in _NIFTI_DTYPES:
        raise FileFormatError(f"{path}: unsupported NIfTI datatype code {datatype}")
    ndim = dim[0]
    if ndim not in (3, 4):
        raise FileFormatError(f"{path}: expected a 3D or 4D image, got dim[0]={ndim}")
    W, H, D = dim[1], dim[2], dim[3]
    n_comp = dim[4] if ndim == 4 else 1
    dtype = _NIFTI_DTYPES[datatype].newbyteorder(bo)
    count = D * H * W * n_comp
    offset = int(vox_offset)
    if offset < _HDR_SIZE:
        raise FileFormatError(f"{path}: invalid vox_offset {vox_offset}")
    expected = offset + count * dtype.itemsize
    if len(raw) < expected:
        raise FileFormatError(f"{path}: truncated NIfTI payload "
                              f"({len(raw)} bytes, expected {expected})")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = np.ascontiguousarray(data.astype(dtype.newbyteorder("=")))
    spacing = (float(pixdim[3]), float(pixdim[2]), float(pixdim[1]))
    return data, (D, H, W), n_comp, float(scl_slope), float(scl_inter), spacing


def read_nifti(path, as_labels: bool = False):
    """Read a single-file NIfTI-1 volume (or labels, skipping scaling)."""
    data, dims, n_comp, slope, inter, spacing = _parse_nifti(path)
    if n_comp != 1:
        raise FileFormatError(f"{path}: {n_comp}-component image; "
                              "use read_nifti_field for deformation fields")
    data = data.reshape(dims)
    if as_labels:
        labels = np.rint(data).astype(np.int32) if data.dtype.kind == "f" \
            else data.astype(np.int32)
        return LabelVolume(labels)
    data = data.astype(np.float32)
    if slope != 0.0 and not (slope == 1.0 and inter == 0.0):
        data = data * np.float32(slope) + np.float32(inter)
    return Volume(data, spacing)


def read_nifti_field(path) -> DeformationField:
    """Read a deformation field stored as a 4D NIfTI with 3 components."""
    data, dims, n_comp, _, _, _ = _parse_nifti(path)
    if n_comp != 3:
        raise FileFormatError(f"{path}: expected 3 displacement components, "
                              f"got {n_comp}")
    disp = data.astype(np.float32).reshape((3,) + dims)
    return DeformationField(disp, level=0)


def write_raw(v: Volume, path) -> None:
    """Headerless float32 little-endian, W fastest, plus a dims sidecar."""
    data = np.ascontiguousarray(v.data, dtype="<f4")
    Path(path).write_bytes(data.tobytes())
    D, H, W = v.dims
    Path(f"{path}.dims").write_text(f"dims={D},{H},{W}\n")


def read_raw(path, dims=None) -> Volume:
    if dims is None:
        sidecar = Path(f"{path}.dims")
        if not sidecar.exists():
            raise FileFormatError(f"{path}: no dims given and sidecar "
                                  f"{sidecar.name} is missing")
        text = sidecar.read_text().strip()
        if not text.startswith("dims="):
            raise FileFormatError(f"{sidecar}: expected 'dims=D,H,W', got {text!r}")
        dims = tuple(int(t) for t in text[len("dims="):].split(","))
    D, H, W = dims
    raw = Path(path).read_bytes()
    if len(raw) != 4 * D * H * W:
        raise FileFormatError(
            f"{path}: payload length {len(raw)} does not match dims "
            f"{(D, H, W)} (expected {4 * D * H * W})")
    data = np.frombuffer(raw, dtype="<f4").reshape(D, H, W)
    return Volume(np.ascontiguousarray(data.astype(np.float32)))


# --- config text ------------------------------------------------------------

_CONFIG_KEYS = {
    "lambda": "lam",
    "loss_weights": "loss_weights",
    "learning_rate": "learning_rate",
    "iterations": "iterations",
    "batch_size": "batch_size",
    "seed": "seed",
    "variant": "variant",
    "deterministic": "deterministic",
    "beta1": "beta1",
    "beta2": "beta2",
    "eps": "eps",
    "pool_mode": "pool_mode",
    "tv_mode": "tv_mode",
    "weight_order": "weight_order",
}


def format_config(config) -> str:
    lines = [
        f"lambda = {config.lam!r}",
        "loss_weights = " + ",".join(repr(float(w)) for w in config.loss_weights),
        f"learning_rate = {config.learning_rate!r}",
        f"iterations = {config.iterations}",
        f"batch_size = {config.batch_size}",
        f"seed = {config.seed}",
        f"variant = {config.variant}",
        f"deterministic = {'true' if config.deterministic else 'false'}",
        f"beta1 = {config.beta1!r}",
        f"beta2 = {config.beta2!r}",
        f"eps = {config.eps!r}",
        f"pool_mode = {config.pool_mode}",
        f"tv_mode = {config.tv_mode}",
        f"weight_order = {config.weight_order}",
    ]
    return "\n".join(lines) + "\n"


def parse_config(text: str):
    """Parse flat ``key = value`` lines ('#' comments); unknown keys fail."""
    from .training import TrainConfig

    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FileFormatError(f"config line {lineno}: expected 'key = value', "
                                  f"got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in _CONFIG_KEYS:
            raise FileFormatError(f"config line {lineno}: unknown key {key!r}")
        attr = _CONFIG_KEYS[key]
        if attr in ("iterations", "batch_size", "seed"):
            values[attr] = int(raw)
        elif attr in ("lam", "learning_rate", "beta1", "beta2", "eps"):
            values[attr] = float(raw)
        elif attr == "deterministic":
            if raw.lower() in ("true", "1", "yes"):
                values[attr] = True
            elif raw.lower() in ("false", "0", "no"):
                values[attr] = False
            else:
                raise FileFormatError(f"config line {lineno}: bad boolean {raw!r}")
        elif attr == "loss_weights":
            parts = [float(t) for t in raw.split(",")]
            if len(parts) != 3:
                raise FileFormatError(f"config line {lineno}: loss_weights needs "
                                      f"3 comma-separated values, got {len(parts)}")
            values[attr] = tuple(parts)
        else:
            values[attr] = raw
    try:
        return TrainConfig(**values)
    except ValueError as exc:
        raise FileFormatError(f"invalid config: {exc}") from exc


def read_config(path):
    return parse_config(Path(path).read_text())


# --- checkpoints ------------------------------------------------------------

_CKPT_MAGIC = b"FCNR"
_CKPT_VERSION = 1
_DTYPE_F32 = 0


def _expected_tensor_shapes(variant: str) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for name, kind, out_ch, in_ch in layer_table(variant):
        if kind == "bn":
            for f in ("gamma", "beta", "running_mean", "running_var"):
                shapes[f"{name}.{f}"] = (out_ch,)
        else:
            shapes[f"{name}.weights"] = (out_ch, in_ch, 3, 3, 3)
            shapes[f"{name}.bias"] = (out_ch,)
    return shapes


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    if arr.dtype != np.float32:
        raise FileFormatError(f"checkpoint tensors must be float32; "
                              f"{name} is {arr.dtype}")
    nb = name.encode("utf-8")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<BB", _DTYPE_F32, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(path, params: RegNetParams, adam_state, config) -> None:
    tensors = dict(params.tensors())
    tensors.update(params.state_tensors())
    if adam_state is not None:
        for name in params.tensors():
            tensors[f"adam.m.{name}"] = adam_state.m[name]
            tensors[f"adam.v.{name}"] = adam_state.v[name]
        tensors["adam.t"] = np.asarray(float(adam_state.t), dtype=np.float32)
    cfg_text = format_config(config).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION,
                             1 if adam_state is not None else 0))
        fh.write(struct.pack("<I", len(cfg_text)))
        fh.write(cfg_text)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            _write_tensor(fh, name, arr)


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FileFormatError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path):
    """Returns (params, adam_state_or_None, config); bit-exact round trip."""
    from .training import AdamState

    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != _CKPT_MAGIC:
            raise FileFormatError(f"{path}: bad checkpoint magic {magic!r}")
        version, flags = struct.unpack("<II", _read_exact(fh, 8, "version/flags"))
        if version != _CKPT_VERSION:
            raise FileFormatError(f"{path}: unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        config = parse_config(_read_exact(fh, cfg_len, "config").decode("utf-8"))
        (n_tensors,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "tensor name length"))
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            dtype_code, rank = struct.unpack("<BB", _read_exact(fh, 2, "tensor header"))
            if dtype_code != _DTYPE_F32:
                raise FileFormatError(f"{path}: unknown tensor dtype code {dtype_code}")
            shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, "tensor dims"))
            count = int(np.prod(shape)) if rank else 1
            payload = _read_exact(fh, 4 * count, f"tensor {name} payload")
            arr = np.frombuffer(payload, dtype="<f4").astype(np.float32)
            tensors[name] = arr.reshape(shape) if rank else arr.reshape(())
        if fh.read(1):
            raise FileFormatError(f"{path}: trailing bytes after last tensor")

    expected = _expected_tensor_shapes(config.variant)
    layers: dict[str, object] = {}
    for lname, kind, out_ch, in_ch in layer_table(config.variant):
        fields = {}
        names = ("gamma", "beta", "running_mean", "running_var") if kind == "bn" \
            else ("weights", "bias")
        for f in names:
            key = f"{lname}.{f}"
            if key not in tensors:
                raise FileFormatError(f"{path}: missing tensor {key} for variant "
                                      f"{config.variant!r}")
            if tensors[key].shape != expected[key]:
                raise FileFormatError(
                    f"{path}: tensor {key} has shape {tensors[key].shape}, variant "
                    f"{config.variant!r} expects {expected[key]}")
            fields[f] = tensors[key].copy()
        if kind == "bn":
            layers[lname] = BNParams(**fields)
        else:
            layers[lname] = ConvParams(stride=2 if kind == "tconv" else 1,
                                       padding=(1, 1, 1), **fields)
    params = RegNetParams(variant=config.variant, layers=layers)

    adam = None
    if flags & 1:
        m, v = {}, {}
        for name in params.tensors():
            for d, key in ((m, f"adam.m.{name}"), (v, f"adam.v.{name}")):
                if key not in tensors:
                    raise FileFormatError(f"{path}: missing Adam tensor {key}")
                d[name] = tensors[key].copy()
        if "adam.t" not in tensors:
            raise FileFormatError(f"{path}: missing Adam step counter")
        adam = AdamState(m=m, v=v, t=int(tensors["adam.t"]))
    return params, adam, config
