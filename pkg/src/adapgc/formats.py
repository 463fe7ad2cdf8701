"""Binary and text file formats. All binary values are little-endian.

See ``docs/formats.md`` for the byte layouts.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .errors import StreamFormatError
from .gaussian import ClassGaussian, Perspective, PerspectiveBank, SufficientStats, cov_deviations
from .streaming import EmaState
from .synth import Stream

COV_MAGIC = b"GDACOV1\x00"
BANK_MAGIC = b"GDABANK1"
STREAM_MAGIC = b"MMTTA1\x00\x00"

_COV_HEADER = struct.Struct("<8sII")
_BANK_HEADER = struct.Struct("<8sIIIIddQ")
_STREAM_HEADER = struct.Struct("<8sIIIQ")


def _f64(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.path = path
        self.pos = 0

    def unpack(self, st: struct.Struct):
        if self.pos + st.size > len(self.data):
            raise StreamFormatError("truncated header", self.path, self.pos)
        out = st.unpack_from(self.data, self.pos)
        self.pos += st.size
        return out

    def doubles(self, n, shape=None):
        nbytes = 8 * n
        if self.pos + nbytes > len(self.data):
            raise StreamFormatError(f"truncated payload (need {n} doubles)", self.path, self.pos)
        arr = np.frombuffer(self.data, dtype="<f8", count=n, offset=self.pos).astype(np.float64)
        self.pos += nbytes
        return arr if shape is None else arr.reshape(shape)

    def finish(self):
        if self.pos != len(self.data):
            raise StreamFormatError("trailing bytes after payload", self.path, self.pos)


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise StreamFormatError(f"cannot read file ({exc.strerror})", path) from exc


# -- covariance-deviation dump ---------------------------------------------


def write_cov_dump(path, bank: PerspectiveBank) -> None:
    mean_cov, devs = cov_deviations(bank)
    with open(path, "wb") as fh:
        fh.write(_COV_HEADER.pack(COV_MAGIC, bank.dim, bank.num_classes))
        fh.write(_f64(mean_cov))
        fh.write(_f64(devs))


def read_cov_dump(path):
    """Return ``(mean_cov (d, d), deviations (C, d, d))``."""
    r = _Reader(_read_bytes(path), path)
    magic, d, C = r.unpack(_COV_HEADER)
    if magic != COV_MAGIC:
        raise StreamFormatError("bad magic, expected GDACOV1", path, 0)
    mean_cov = r.doubles(d * d, (d, d))
    devs = r.doubles(C * d * d, (C, d, d))
    r.finish()
    return mean_cov, devs


def write_cov_text(path, bank: PerspectiveBank) -> None:
    """Plain-text twin of the binary dump, one matrix row per line."""
    mean_cov, devs = cov_deviations(bank)
    with open(path, "w") as fh:
        fh.write(f"# GDACOV1 perspective={bank.perspective.name} d={bank.dim} C={bank.num_classes}\n")
        blocks = [("mean", mean_cov)] + [(f"delta {c}", devs[c]) for c in range(bank.num_classes)]
        for name, mat in blocks:
            fh.write(f"[{name}]\n")
            for row in mat:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_cov_text(path):
    mats, current = [], None
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("# GDACOV1"):
            raise StreamFormatError("bad header, expected '# GDACOV1'", path, 0)
        for line in fh:
            line = line.strip()
            if line.startswith("["):
                current = []
                mats.append(current)
            elif line:
                current.append([float(v) for v in line.split()])
    arrs = [np.array(m) for m in mats]
    return arrs[0], np.stack(arrs[1:])


# -- bank checkpoint ---------------------------------------------------------


def write_bank(path, bank: PerspectiveBank) -> None:
    d, C = bank.dim, bank.num_classes
    ema: EmaState = bank.ema
    with open(path, "wb") as fh:
        fh.write(
            _BANK_HEADER.pack(
                BANK_MAGIC, int(bank.perspective), d, C, 0, ema.alpha, bank.shrinkage, bank.updates
            )
        )
        for s in bank.stats:
            fh.write(_f64([s.count]))
            fh.write(_f64(s.first_moment))
            fh.write(_f64(s.second_moment))
        for p in bank.params:
            fh.write(_f64([p.prior, p.log_prior, p.shrinkage]))
            fh.write(_f64(p.mean))
            fh.write(_f64(p.covariance))
        fh.write(_f64(ema.priors))
        fh.write(_f64(ema.means))
        fh.write(_f64(ema.covariances))


def read_bank(path) -> PerspectiveBank:
    r = _Reader(_read_bytes(path), path)
    magic, persp, d, C, _reserved, alpha, shrinkage, updates = r.unpack(_BANK_HEADER)
    if magic != BANK_MAGIC:
        raise StreamFormatError("bad magic, expected GDABANK1", path, 0)
    if persp not in (0, 1, 2):
        raise StreamFormatError(f"unknown perspective code {persp}", path, 8)
    stats = []
    for _ in range(C):
        count = float(r.doubles(1)[0])
        stats.append(SufficientStats(count, r.doubles(d), r.doubles(d * d, (d, d))))
    params = []
    for c in range(C):
        prior, log_prior, used = r.doubles(3)
        mean = r.doubles(d)
        cov = r.doubles(d * d, (d, d))
        g = ClassGaussian.build(prior, mean, cov, log_prior=log_prior, shrinkage=used, class_index=c)
        params.append(g)
    ema = EmaState(
        alpha=alpha,
        priors=r.doubles(C),
        means=r.doubles(C * d, (C, d)),
        covariances=r.doubles(C * d * d, (C, d, d)),
    )
    r.finish()
    return PerspectiveBank(
        perspective=Perspective(persp),
        dim=d,
        num_classes=C,
        stats=stats,
        params=tuple(params),
        ema=ema,
        updates=int(updates),
        shrinkage=shrinkage,
    )


# -- feature stream ----------------------------------------------------------


def _record_dtype(d1, d2):
    return np.dtype([("label", "<i4"), ("m1", "<f8", (d1,)), ("m2", "<f8", (d2,))])


def write_stream(path, stream: Stream) -> None:
    d1, d2 = stream.x_m1.shape[1], stream.x_m2.shape[1]
    recs = np.empty(len(stream), dtype=_record_dtype(d1, d2))
    recs["label"] = stream.labels
    recs["m1"] = stream.x_m1
    recs["m2"] = stream.x_m2
    with open(path, "wb") as fh:
        fh.write(_STREAM_HEADER.pack(STREAM_MAGIC, stream.num_classes, d1, d2, len(stream)))
        fh.write(recs.tobytes())


def read_stream_header(path):
    """Return ``(num_classes, d1, d2, count)``; validates the file length."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read(_STREAM_HEADER.size)
            fh.seek(0, 2)
            size = fh.tell()
    except OSError as exc:
        raise StreamFormatError(f"cannot read file ({exc.strerror})", path) from exc
    if len(raw) < _STREAM_HEADER.size:
        raise StreamFormatError("truncated header", path, len(raw))
    magic, C, d1, d2, count = _STREAM_HEADER.unpack(raw)
    if magic != STREAM_MAGIC:
        raise StreamFormatError("bad magic, expected MMTTA1", path, 0)
    expected = _STREAM_HEADER.size + count * _record_dtype(d1, d2).itemsize
    if size != expected:
        raise StreamFormatError(
            f"file holds {size} bytes but header promises {expected}", path, min(size, expected)
        )
    return C, d1, d2, count


def iter_stream(path, batch_size):
    """Yield ``(x_m1, x_m2, labels)`` batches, reading each record exactly once."""
    C, d1, d2, count = read_stream_header(path)
    dtype = _record_dtype(d1, d2)
    with open(path, "rb") as fh:
        fh.seek(_STREAM_HEADER.size)
        remaining = count
        while remaining:
            n = min(batch_size, remaining)
            offset = fh.tell()
            recs = np.fromfile(fh, dtype=dtype, count=n)
            if recs.shape[0] != n:
                raise StreamFormatError("unexpected end of records", path, offset)
            labels = recs["label"].astype(np.int64)
            if np.any(labels < 0) or np.any(labels >= C):
                raise StreamFormatError("label out of range", path, offset)
            remaining -= n
            yield recs["m1"].astype(np.float64), recs["m2"].astype(np.float64), labels


def read_stream(path) -> Stream:
    C, d1, d2, count = read_stream_header(path)
    parts = list(iter_stream(path, max(count, 1)))
    if not parts:
        return Stream(np.empty((0, d1)), np.empty((0, d2)), np.empty(0, dtype=np.int64), C)
    x1, x2, y = parts[0]
    return Stream(x1, x2, y, C)


def write_stream_csv(path, stream: Stream) -> None:
    d1, d2 = stream.x_m1.shape[1], stream.x_m2.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"m1_{j}" for j in range(d1)] + [f"m2_{j}" for j in range(d2)])
        for y, a, b in zip(stream.labels, stream.x_m1, stream.x_m2):
            w.writerow([int(y)] + [repr(float(v)) for v in a] + [repr(float(v)) for v in b])
