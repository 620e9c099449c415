"""Readers and writers for the on-disk formats.

* measurement: binary, little-endian: b"MTDM", u32 version (1), u64 N,
  u64 L, f64 sigma, then N f64 samples
* signal / support: text, one number per line
* pair separation: text, one ``gap mass`` pair per line
* stats and reports: text, one ``key = value`` per line; arrays are
  space-separated; floats use the shortest round-trip repr
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .core import Measurement, PairSeparationFunction, SupportSequence
from .errors import DataError
from .moments import MomentStats

MAGIC = b"MTDM"
VERSION = 1
_HEADER = struct.Struct("<4sIQQd")


def write_measurement(path, y: Measurement) -> None:
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, y.N, y.L, y.sigma))
            fh.write(np.ascontiguousarray(y.samples, dtype="<f8").tobytes())
    except OSError as exc:
        raise DataError(f"cannot write measurement: {exc.strerror}", path) from exc


def read_measurement(path) -> Measurement:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read measurement: {exc.strerror}", path) from exc
    if len(raw) < _HEADER.size:
        raise DataError("truncated header", path, len(raw))
    magic, version, N, L, sigma = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataError(f"bad magic {magic!r}", path, 0)
    if version != VERSION:
        raise DataError(f"unsupported version {version}", path, 4)
    expected = _HEADER.size + 8 * N
    if len(raw) != expected:
        raise DataError(f"expected {expected} bytes for N={N}, found {len(raw)}", path,
                        min(len(raw), expected))
    if L < 1 or N < L:
        raise DataError(f"invalid sizes N={N}, L={L}", path, 8)
    if not sigma >= 0:
        raise DataError(f"invalid sigma {sigma!r}", path, 24)
    samples = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size, count=N).astype(np.float64)
    bad = np.flatnonzero(~np.isfinite(samples))
    if bad.size:
        raise DataError("non-finite sample", path, _HEADER.size + 8 * int(bad[0]))
    return Measurement(samples, int(L), float(sigma))


def _lines(path):
    """Yield ``(byte_offset, stripped_line)`` for non-blank, non-comment lines."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read: {exc.strerror}", path) from exc
    offset = 0
    for raw in data.splitlines(keepends=True):
        line = raw.decode("utf-8", errors="replace").strip()
        if line and not line.startswith("#"):
            yield offset, line
        offset += len(raw)


def _write_text(path, text: str) -> None:
    path = Path(path)
    try:
        path.write_text(text)
    except OSError as exc:
        raise DataError(f"cannot write: {exc.strerror}", path) from exc


def fmt(v) -> str:
    return repr(float(v))


def read_signal(path) -> np.ndarray:
    values = []
    for offset, line in _lines(path):
        try:
            values.append(float(line))
        except ValueError:
            raise DataError(f"not a number: {line!r}", path, offset) from None
    if not values:
        raise DataError("empty signal file", path, 0)
    return np.array(values)


def write_signal(path, x) -> None:
    _write_text(path, "".join(fmt(v) + "\n" for v in np.asarray(x).ravel()))


def read_support(path, N: int, L: int) -> SupportSequence:
    starts = []
    for offset, line in _lines(path):
        try:
            starts.append(int(line))
        except ValueError:
            raise DataError(f"not an integer: {line!r}", path, offset) from None
    try:
        return SupportSequence(np.array(starts, dtype=np.int64), N, L)
    except ValueError as exc:
        raise DataError(str(exc), path) from None


def write_support(path, support: SupportSequence) -> None:
    _write_text(path, "".join(f"{int(s)}\n" for s in support.starts))


def read_psf(path, L: int) -> PairSeparationFunction:
    gaps, masses = [], []
    for offset, line in _lines(path):
        parts = line.split()
        try:
            if len(parts) != 2:
                raise ValueError
            gaps.append(int(parts[0]))
            masses.append(float(parts[1]))
        except ValueError:
            raise DataError(f"expected 'gap mass', got {line!r}", path, offset) from None
    if not gaps:
        raise DataError("empty pair separation file", path, 0)
    try:
        return PairSeparationFunction.from_pairs(gaps, masses, L)
    except ValueError as exc:
        raise DataError(str(exc), path) from None


def write_psf(path, xi: PairSeparationFunction) -> None:
    _write_text(path, "".join(f"{g} {fmt(m)}\n" for g, m in enumerate(xi.mass) if m > 0))


def format_value(v) -> str:
    if isinstance(v, (list, tuple, np.ndarray)):
        return " ".join(format_value(e) for e in np.asarray(v).ravel().tolist())
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return fmt(v)
    return str(v)


def write_keyvalue(path, items) -> None:
    """Write ``key = value`` lines in the given order."""
    _write_text(path, "".join(f"{k} = {format_value(v)}\n" for k, v in items))


def read_keyvalue(path) -> dict:
    out = {}
    for offset, line in _lines(path):
        if "=" not in line:
            raise DataError(f"expected 'key = value', got {line!r}", path, offset)
        key, _, value = line.partition("=")
        out[key.strip()] = (offset, value.strip())
    return out


def write_stats(path, stats: MomentStats) -> None:
    write_keyvalue(path, [("N", stats.N), ("L", stats.L), ("sigma", stats.sigma),
                          ("a1", stats.a1), ("a2", stats.a2), ("a3", stats.a3)])


def read_stats(path) -> MomentStats:
    kv = read_keyvalue(path)
    missing = [k for k in ("N", "L", "sigma", "a1", "a2", "a3") if k not in kv]
    if missing:
        raise DataError(f"missing keys {missing}", path)

    def parse(key, kind):
        offset, text = kv[key]
        try:
            if kind == "array":
                return np.array([float(t) for t in text.split()])
            return kind(text)
        except ValueError:
            raise DataError(f"bad value for {key}: {text!r}", path, offset) from None

    try:
        return MomentStats(parse("a1", float), parse("a2", "array"), parse("a3", "array"),
                           parse("N", int), parse("L", int), parse("sigma", float))
    except ValueError as exc:
        raise DataError(str(exc), path) from None


def sniff_format(path) -> str:
    """``"measurement"`` for the binary format, otherwise ``"stats"``."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            head = fh.read(4)
    except OSError as exc:
        raise DataError(f"cannot read: {exc.strerror}", path) from exc
    return "measurement" if head == MAGIC else "stats"
