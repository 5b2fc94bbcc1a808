"""Binary state dumps.

Layout: a fixed header (magic, version, field count), a table of field
entries (name, kind, shape, byte offset, byte count), then the raw
little-endian 64-bit data of every field in table order.
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ale_minihydro.exceptions import ConfigError
from ale_minihydro.lagrange_hydro import HydroState
from ale_minihydro.mesh_fespace import HighOrderMesh, h1_space

logger = logging.getLogger(__name__)

MAGIC = b"ALEDUMP\0"
VERSION = 1
MAX_NDIM = 4

HEADER_DTYPE = np.dtype([("magic", "S8"), ("version", "<u4"), ("nfields", "<u4")])
ENTRY_DTYPE = np.dtype(
    [
        ("name", "S16"),
        ("kind", "S4"),
        ("ndim", "<u4"),
        ("shape", "<i8", (MAX_NDIM,)),
        ("offset", "<i8"),
        ("nbytes", "<i8"),
    ]
)
_KINDS = {b"f8": np.dtype("<f8"), b"i8": np.dtype("<i8")}


class StateFormatError(ConfigError):
    def __init__(self, path: str | Path, reason: str) -> None:
        super().__init__(f"{path}: not a readable state dump ({reason})")
        self.path = str(path)
        self.reason = reason


@dataclass
class StateDump:
    state: HydroState
    dof_map: np.ndarray
    dim: int
    order: int
    thermo_order: int

    @property
    def mesh(self) -> HighOrderMesh:
        h1 = h1_space(self.dof_map, self.order, self.dim)
        return HighOrderMesh(h1, self.state.x.reshape(self.dim, -1))


def _kind(array: np.ndarray) -> bytes:
    return b"i8" if np.issubdtype(array.dtype, np.integer) else b"f8"


def encode_fields(fields: dict[str, np.ndarray]) -> bytes:
    """Self-describing container of named 64-bit arrays"""
    arrays = {name: np.ascontiguousarray(a, dtype=_KINDS[_kind(np.asarray(a))]) for name, a in fields.items()}
    table = np.zeros(len(arrays), dtype=ENTRY_DTYPE)
    offset = HEADER_DTYPE.itemsize + table.nbytes
    for i, (name, a) in enumerate(arrays.items()):
        if a.ndim > MAX_NDIM:
            raise ConfigError(f"field {name!r} has {a.ndim} axes; at most {MAX_NDIM} are stored")
        table["name"][i] = name.encode()
        table["kind"][i] = _kind(a)
        table["ndim"][i] = a.ndim
        table["shape"][i, : a.ndim] = a.shape
        table["offset"][i] = offset
        table["nbytes"][i] = a.nbytes
        offset += a.nbytes
    header = np.array([(MAGIC, VERSION, len(arrays))], dtype=HEADER_DTYPE)
    return b"".join([header.tobytes(), table.tobytes()] + [a.tobytes() for a in arrays.values()])


def decode_fields(data: bytes, source: str | Path = "<bytes>") -> dict[str, np.ndarray]:
    if len(data) < HEADER_DTYPE.itemsize:
        raise StateFormatError(source, "truncated header")
    header = np.frombuffer(data, dtype=HEADER_DTYPE, count=1)[0]
    if header["magic"] != MAGIC.rstrip(b"\0"):
        raise StateFormatError(source, "bad magic")
    if header["version"] != VERSION:
        raise StateFormatError(source, f"unsupported version {header['version']}")
    nfields = int(header["nfields"])
    if len(data) < HEADER_DTYPE.itemsize + nfields * ENTRY_DTYPE.itemsize:
        raise StateFormatError(source, "truncated field table")
    table = np.frombuffer(data, dtype=ENTRY_DTYPE, count=nfields, offset=HEADER_DTYPE.itemsize)
    fields = {}
    for entry in table:
        dtype = _KINDS.get(bytes(entry["kind"]))
        if dtype is None:
            raise StateFormatError(source, f"unknown field kind {entry['kind']!r}")
        offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        if offset + nbytes > len(data):
            raise StateFormatError(source, f"field {entry['name'].decode()} runs past the end")
        shape = tuple(int(n) for n in entry["shape"][: entry["ndim"]])
        values = np.frombuffer(data, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset)
        fields[entry["name"].decode()] = values.reshape(shape).copy()
    return fields


def write_state(path: str | Path, state: HydroState, mesh: HighOrderMesh, thermo_order: int | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    layout = np.array([mesh.dim, mesh.order, thermo_order or mesh.order], dtype=np.int64)
    data = encode_fields(
        {
            "layout": layout,
            "t": np.array(state.t),
            "x": state.x,
            "v": state.v,
            "e": state.e,
            "qdata0": state.qdata0,
            "dof_map": mesh.h1.dof_map,
        }
    )
    path.write_bytes(data)
    logger.info(f"wrote state dump {path} ({len(data)} bytes)")
    return path


def read_state(path: str | Path) -> StateDump:
    fields = decode_fields(Path(path).read_bytes(), path)
    missing = {"layout", "t", "x", "v", "e", "qdata0", "dof_map"} - fields.keys()
    if missing:
        raise StateFormatError(path, f"missing fields {sorted(missing)}")
    dim, order, thermo_order = (int(n) for n in fields["layout"])
    state = HydroState(
        x=fields["x"], v=fields["v"], e=fields["e"], qdata0=fields["qdata0"], t=float(fields["t"])
    )
    return StateDump(state=state, dof_map=fields["dof_map"], dim=dim, order=order, thermo_order=thermo_order)
