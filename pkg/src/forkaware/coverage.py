"""AFL-style shared edge-coverage bitmap.

65536 saturating 8-bit counters, directly indexed by probe id (no prev^cur
hashing: probe placement is static, so expected edge counts stay exact).
The segment is SysV shared memory so every process forked below the target
writes the same map, and the counters survive any child's death.
"""

from __future__ import annotations

import ctypes
import weakref
from enum import Enum
from typing import Optional

MAP_SIZE = 1 << 16

SHM_ENV_VAR = "FORKAWARE_SHM_ID"

# Hit-count classes, AFL-style: (lo, hi, class mask).
CLASS_RANGES = (
    (0, 0, 0),
    (1, 1, 1),
    (2, 2, 2),
    (3, 3, 4),
    (4, 7, 8),
    (8, 15, 16),
    (16, 31, 32),
    (32, 127, 64),
    (128, 255, 128),
)


def _build_class_lut() -> bytes:
    lut = bytearray(256)
    for lo, hi, cls in CLASS_RANGES:
        for count in range(lo, hi + 1):
            lut[count] = cls
    return bytes(lut)


CLASS_LUT = _build_class_lut()


class Novelty(Enum):
    NEW_BUCKET = "new_bucket"
    NEW_EDGE = "new_edge"


class ShmUnavailable(RuntimeError):
    """The host shared-memory facility refused us."""


def zero_map(size: int = MAP_SIZE) -> bytes:
    return bytes(size)


def saturating_record(buf: bytearray, edge: int) -> None:
    """Monitor/sim-side probe: bump counter[edge], saturating at 255."""
    if buf[edge] != 0xFF:
        buf[edge] += 1


def bucketize(raw: bytes) -> bytes:
    """Map raw hit counts onto power-of-two class masks (idempotent)."""
    return bytes(raw).translate(CLASS_LUT)


def merge(global_map: bytes, current: bytes) -> bytes:
    """Per-index OR of class masks; the result never loses bits."""
    if len(global_map) != len(current):
        raise ValueError("map sizes differ")
    merged = int.from_bytes(global_map, "little") | int.from_bytes(current, "little")
    return merged.to_bytes(len(global_map), "little")


def has_new_bits(global_map: bytes, current: bytes) -> Optional[Novelty]:
    """NEW_EDGE if `current` touches an index the global map never saw,
    NEW_BUCKET if it only adds hit-count class bits, None otherwise."""
    if len(global_map) != len(current):
        raise ValueError("map sizes differ")
    g = int.from_bytes(global_map, "little")
    c = int.from_bytes(current, "little")
    if c & ~g == 0:
        return None
    merged = (g | c).to_bytes(len(global_map), "little")
    if count_edges(merged) > count_edges(global_map):
        return Novelty.NEW_EDGE
    return Novelty.NEW_BUCKET


def count_edges(m: bytes) -> int:
    return len(m) - m.count(0)


def map_to_json_dict(m: bytes) -> dict:
    return {str(i): v for i, v in enumerate(m) if v}


# ---------------------------------------------------------------------------
# SysV shared memory segment (real backend; the simulator keeps a bytearray)

_IPC_PRIVATE = 0
_IPC_CREAT = 0o1000
_IPC_RMID = 0

_libc = ctypes.CDLL(None, use_errno=True)
_libc.shmget.restype = ctypes.c_int
_libc.shmget.argtypes = [ctypes.c_int, ctypes.c_size_t, ctypes.c_int]
_libc.shmat.restype = ctypes.c_void_p
_libc.shmat.argtypes = [ctypes.c_int, ctypes.c_void_p, ctypes.c_int]
_libc.shmdt.restype = ctypes.c_int
_libc.shmdt.argtypes = [ctypes.c_void_p]
_libc.shmctl.restype = ctypes.c_int
_libc.shmctl.argtypes = [ctypes.c_int, ctypes.c_int, ctypes.c_void_p]


def _shm_attach(shm_id: int) -> int:
    addr = _libc.shmat(shm_id, None, 0)
    if addr is None or addr == ctypes.c_void_p(-1).value:
        raise ShmUnavailable(f"shmat({shm_id}) failed, errno {ctypes.get_errno()}")
    return addr


class SharedCoverageMap:
    """A zeroed SysV segment of MAP_SIZE bytes, inheritable across fork.

    The id is what goes into the FORKAWARE_SHM_ID environment variable.
    Targets write it concurrently without synchronization; the monitor
    snapshots it once the tree is quiet (torn counters are tolerated).
    """

    def __init__(self, size: int = MAP_SIZE):
        self.size = size
        shm_id = _libc.shmget(_IPC_PRIVATE, size, _IPC_CREAT | 0o600)
        if shm_id < 0:
            raise ShmUnavailable(f"shmget failed, errno {ctypes.get_errno()}")
        self.id = shm_id
        self._addr = _shm_attach(shm_id)
        self.clear()
        self._finalizer = weakref.finalize(self, _destroy_segment, shm_id, self._addr)

    @property
    def buffer(self) -> ctypes.Array:
        """Writable view of the live segment (tests poke probes through it)."""
        return (ctypes.c_ubyte * self.size).from_address(self._addr)

    def snapshot(self) -> bytes:
        return ctypes.string_at(self._addr, self.size)

    def clear(self) -> None:
        ctypes.memset(self._addr, 0, self.size)

    def destroy(self) -> None:
        self._finalizer()

    def __enter__(self) -> "SharedCoverageMap":
        return self

    def __exit__(self, *exc) -> None:
        self.destroy()


def _destroy_segment(shm_id: int, addr: int) -> None:
    _libc.shmdt(ctypes.c_void_p(addr))
    _libc.shmctl(shm_id, _IPC_RMID, None)


def create_shared(id_hint: Optional[int] = None) -> SharedCoverageMap:
    """Create a fresh zeroed shared map. SysV picks its own id, so id_hint
    is accepted only for signature symmetry with simulated maps."""
    del id_hint
    return SharedCoverageMap()


def read_shared(shm_id: int, size: int = MAP_SIZE) -> bytes:
    """Attach an existing segment by id, copy it out, detach."""
    addr = _shm_attach(shm_id)
    try:
        return ctypes.string_at(addr, size)
    finally:
        _libc.shmdt(ctypes.c_void_p(addr))
