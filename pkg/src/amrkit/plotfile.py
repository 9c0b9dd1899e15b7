"""Plotfile, particle-dump, and checkpoint I/O.

Directory layout (full byte layout in FORMAT.md):

    <path>/Header              ASCII metadata
    <path>/Level_<k>/data.bin  fixed-order binary Fab records
    <path>/particles/Header    ASCII particle schema + tile table
    <path>/particles/data.bin  binary particle records

Every record's byte offset is computed before any data is written, so the
file contents depend only on the data and never on write interleaving.
Static mode writes rank by rank in ceil(R/nwriters) waves with nwriters
live at once; async mode snapshots the data, hands it to one background
writer thread (bounded queue of one, so a second call blocks until the
writer is free), and returns a handle whose wait() surfaces any error.
"""

from __future__ import annotations

import os
import queue
import threading

import numpy as np

from . import counters
from .amr_core import Geometry
from .boxarray import BoxArray
from .distribution import DistributionMapping
from .fabarray import FabArray
from .index_space import Box, IntVect

PLOTFILE_TAG = "amrkit-plotfile-1"
PARTICLE_TAG = "amrkit-particles-1"
CHECKPOINT_TAG = "amrkit-checkpoint-1"


# ---------------------------------------------------------------------------
# modes and handles
# ---------------------------------------------------------------------------


class OutputMode:
    """static(nwriters) writes now in waves; async() snapshots and returns."""

    __slots__ = ("kind", "nwriters")

    def __init__(self, kind, nwriters=1):
        if kind not in ("static", "async"):
            raise ValueError("mode kind must be 'static' or 'async'")
        if int(nwriters) < 1:
            raise ValueError("nwriters must be >= 1")
        self.kind = kind
        self.nwriters = int(nwriters)

    @staticmethod
    def static(nwriters=1):
        return OutputMode("static", nwriters)

    @staticmethod
    def asynchronous():
        return OutputMode("async")

    def __repr__(self):
        return f"OutputMode({self.kind}, nwriters={self.nwriters})"


class WriteHandle:
    def __init__(self):
        self._event = threading.Event()
        self._error = None

    def _finish(self, error=None):
        self._error = error
        self._event.set()

    @property
    def done(self):
        return self._event.is_set()

    def wait(self, timeout=None):
        if not self._event.wait(timeout):
            raise TimeoutError("write did not complete in time")
        if self._error is not None:
            raise self._error


class _AsyncWriter:
    """One background writer; one pending snapshot of backpressure."""

    def __init__(self):
        self._queue = queue.Queue(maxsize=1)
        self._thread = None
        self._lock = threading.Lock()

    def _ensure_thread(self):
        with self._lock:
            if self._thread is None or not self._thread.is_alive():
                self._thread = threading.Thread(target=self._run, daemon=True)
                self._thread.start()

    def _run(self):
        while True:
            job, handle = self._queue.get()
            try:
                job()
                handle._finish()
            except BaseException as exc:  # surfaced on handle.wait()
                handle._finish(exc)

    def submit(self, job):
        self._ensure_thread()
        handle = WriteHandle()
        self._queue.put((job, handle))  # blocks while a snapshot is pending
        return handle


_async_writer = _AsyncWriter()


# ---------------------------------------------------------------------------
# header
# ---------------------------------------------------------------------------


class PlotfileHeader:
    """Everything needed to interpret the binary records."""

    def __init__(self, time, names, geoms):
        self.version = PLOTFILE_TAG
        self.time = float(time)
        self.names = list(names)
        if any(" " in n for n in self.names):
            raise ValueError("component names may not contain spaces")
        self.geoms = list(geoms)

    @property
    def nlevels(self):
        return len(self.geoms)


def _fmt_floats(values):
    return " ".join(repr(float(v)) for v in values)


def _fmt_ints(values):
    return " ".join(str(int(v)) for v in values)


def _box_token(b):
    return _fmt_ints(list(b.lo.coords) + list(b.hi.coords))


def _parse_box(parts, dim):
    lo = IntVect(int(x) for x in parts[:dim])
    hi = IntVect(int(x) for x in parts[dim : 2 * dim])
    return Box(lo, hi)


def _record_layout(mesh):
    """(offsets, nbytes) per box: comp-major float64 of the valid region."""
    offsets, sizes = [], []
    at = 0
    for i in range(len(mesh.ba)):
        n = 8 * mesh.ncomp * mesh.ba[i].num_cells()
        offsets.append(at)
        sizes.append(n)
        at += n
    return offsets, sizes, at


def _header_text(header, meshes):
    dim = header.geoms[0].dim
    lines = [
        PLOTFILE_TAG,
        "endian little",
        "real float64",
        f"time {header.time!r}",
        f"dim {dim}",
        f"nlevels {header.nlevels}",
        f"components {len(header.names)} " + " ".join(header.names),
        "prob_lo " + _fmt_floats(header.geoms[0].prob_lo),
        "prob_hi " + _fmt_floats(header.geoms[0].prob_hi),
        "periodic " + _fmt_ints(header.geoms[0].periodic),
    ]
    for lev, mesh in enumerate(meshes):
        geom = header.geoms[lev]
        offsets, sizes, total = _record_layout(mesh)
        lines.append(f"level {lev}")
        lines.append("domain " + _box_token(geom.domain))
        lines.append("cell_size " + _fmt_floats(geom.cell_size))
        lines.append(f"nboxes {len(mesh.ba)}")
        for i in range(len(mesh.ba)):
            lines.append(
                "box "
                + _box_token(mesh.ba[i])
                + f" {offsets[i]} {sizes[i]}"
            )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# plotfile write/read
# ---------------------------------------------------------------------------


def _write_level_records(
    fname, mesh_arrays, owners, offsets, sizes, total, nwriters, nranks
):
    """Rank-by-rank positioned writes in waves of at most nwriters."""
    fd = os.open(fname, os.O_CREAT | os.O_WRONLY | os.O_TRUNC)
    try:
        if total:
            os.pwrite(fd, b"\0", total - 1)  # size the file up front
        active = [0]
        gauge = threading.Lock()

        def write_rank(rank, barrier):
            barrier.wait()  # the whole wave is live before anyone writes
            with gauge:
                active[0] += 1
                counters.peak("io_peak_writers", active[0])
            try:
                for i, r in enumerate(owners):
                    if r != rank:
                        continue
                    buf = np.ascontiguousarray(mesh_arrays[i]).astype(
                        "<f8", copy=False
                    )
                    data = buf.tobytes()
                    if len(data) != sizes[i]:
                        raise IOError(f"record {i} size mismatch in {fname}")
                    os.pwrite(fd, data, offsets[i])
                    counters.incr("io_bytes_written", len(data))
            finally:
                with gauge:
                    active[0] -= 1

        for wave_start in range(0, nranks, nwriters):
            wave = list(range(wave_start, min(wave_start + nwriters, nranks)))
            counters.incr("io_waves")
            barrier = threading.Barrier(len(wave))
            threads = [
                threading.Thread(target=write_rank, args=(r, barrier))
                for r in wave
            ]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
    finally:
        os.close(fd)


def _write_plotfile_now(path, header_text, level_payloads, nwriters):
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "Header"), "w") as fh:
        fh.write(header_text)
    for lev, (arrays, owners, offsets, sizes, total, nranks) in enumerate(
        level_payloads
    ):
        d = os.path.join(path, f"Level_{lev}")
        os.makedirs(d, exist_ok=True)
        _write_level_records(
            os.path.join(d, "data.bin"),
            arrays,
            owners,
            offsets,
            sizes,
            total,
            nwriters,
            nranks,
        )


def write_plotfile(path, meshes, header, mode=None, transport=None):
    """Write one plotfile; returns a WriteHandle (already done when static)."""
    if mode is None:
        mode = OutputMode.static(1)
    if len(meshes) != header.nlevels:
        raise ValueError("one mesh FabArray per header level required")
    header_text = _header_text(header, meshes)
    payloads = []
    for mesh in meshes:
        offsets, sizes, total = _record_layout(mesh)
        arrays = [mesh.fab(i).valid().copy() for i in range(len(mesh.ba))]
        owners = [mesh.dm[i] for i in range(len(mesh.ba))]
        payloads.append((arrays, owners, offsets, sizes, total, mesh.dm.nranks))
    if mode.kind == "async":
        return _async_writer.submit(
            lambda: _write_plotfile_now(path, header_text, payloads, 1)
        )
    _write_plotfile_now(path, header_text, payloads, mode.nwriters)
    handle = WriteHandle()
    handle._finish()
    return handle


class _HeaderReader:
    def __init__(self, path):
        try:
            with open(path) as fh:
                self.lines = [ln.rstrip("\n") for ln in fh]
        except OSError as exc:
            raise IOError(f"cannot read header at {path}: {exc}") from exc
        self.at = 0

    def next(self, expect=None):
        line = self.lines[self.at]
        self.at += 1
        if expect is not None and not line.startswith(expect):
            raise ValueError(f"malformed header: wanted {expect!r}, got {line!r}")
        return line.split()


def read_plotfile(path, nranks=1):
    """(header, meshes): metadata plus one ngrow=0 FabArray per level."""
    rd = _HeaderReader(os.path.join(path, "Header"))
    tag = rd.lines[0]
    if tag != PLOTFILE_TAG:
        raise ValueError(f"not a plotfile (version tag {tag!r})")
    rd.at = 1
    rd.next("endian")
    rd.next("real")
    time = float(rd.next("time")[1])
    dim = int(rd.next("dim")[1])
    nlevels = int(rd.next("nlevels")[1])
    comp_parts = rd.next("components")
    names = comp_parts[2 : 2 + int(comp_parts[1])]
    prob_lo = [float(x) for x in rd.next("prob_lo")[1:]]
    prob_hi = [float(x) for x in rd.next("prob_hi")[1:]]
    periodic = [bool(int(x)) for x in rd.next("periodic")[1:]]
    geoms, meshes = [], []
    for lev in range(nlevels):
        rd.next("level")
        dom = _parse_box(rd.next("domain")[1:], dim)
        rd.next("cell_size")
        nboxes = int(rd.next("nboxes")[1])
        boxes, offs, sizes = [], [], []
        for _ in range(nboxes):
            parts = rd.next("box")[1:]
            boxes.append(_parse_box(parts, dim))
            offs.append(int(parts[2 * dim]))
            sizes.append(int(parts[2 * dim + 1]))
        geom = Geometry(dom, prob_lo, prob_hi, periodic)
        geoms.append(geom)
        ba = BoxArray(boxes)
        dm = (
            DistributionMapping.single_rank(len(ba))
            if nranks == 1
            else DistributionMapping([i % nranks for i in range(len(ba))], nranks)
        )
        mesh = FabArray(ba, dm, ncomp=len(names), ngrow=0)
        fname = os.path.join(path, f"Level_{lev}", "data.bin")
        with open(fname, "rb") as fh:
            raw = fh.read()
        for i in range(nboxes):
            rec = np.frombuffer(raw[offs[i] : offs[i] + sizes[i]], dtype="<f8")
            shape = (len(names),) + tuple(ba[i].extents())
            mesh.fab(i).valid()[...] = rec.reshape(shape)
        meshes.append(mesh)
    header = PlotfileHeader(time, names, geoms)
    return header, meshes


# ---------------------------------------------------------------------------
# particles
# ---------------------------------------------------------------------------


def write_particles(path, pc):
    """Dump every tile's records; deterministic because keys are sorted and
    tiles are id-sorted."""
    os.makedirs(path, exist_ok=True)
    keys = [k for k in pc.sorted_keys() if pc.tiles[k].size]
    lines = [
        PARTICLE_TAG,
        "endian little",
        f"dim {pc.dim}",
        f"nreal {pc.nreal}",
        f"nint {pc.nint}",
        f"ntiles {len(keys)}",
    ]
    at = 0
    spans = []
    for key in keys:
        n = pc.tiles[key].size
        nbytes = n * (8 + 4 + 8 * pc.dim + 8 * pc.nreal + 8 * pc.nint)
        lines.append(f"tile {key[0]} {key[1]} {key[2]} {n} {at} {nbytes}")
        spans.append((key, at, nbytes))
        at += nbytes
    with open(os.path.join(path, "Header"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(path, "data.bin"), "wb") as fh:
        for key, _, _ in spans:
            t = pc.tiles[key]
            fh.write(np.ascontiguousarray(t.aos["id"]).astype("<i8").tobytes())
            fh.write(np.ascontiguousarray(t.aos["origin"]).astype("<i4").tobytes())
            fh.write(np.ascontiguousarray(t.aos["pos"]).astype("<f8").tobytes())
            fh.write(np.ascontiguousarray(t.rdata).astype("<f8").tobytes())
            fh.write(np.ascontiguousarray(t.idata).astype("<i8").tobytes())


def read_particles(path, expect_schema=None):
    """(meta, {tile key: (ids, origin, pos, rdata, idata)})."""
    rd = _HeaderReader(os.path.join(path, "Header"))
    if rd.lines[0] != PARTICLE_TAG:
        raise ValueError(f"not a particle dump (version tag {rd.lines[0]!r})")
    rd.at = 1
    rd.next("endian")
    dim = int(rd.next("dim")[1])
    nreal = int(rd.next("nreal")[1])
    nint = int(rd.next("nint")[1])
    if expect_schema is not None and expect_schema != (dim, nreal, nint):
        raise ValueError(
            f"schema mismatch: file has (dim, nreal, nint)={(dim, nreal, nint)}, "
            f"expected {expect_schema}"
        )
    ntiles = int(rd.next("ntiles")[1])
    fname = os.path.join(path, "data.bin")
    raw = b""
    if ntiles:
        with open(fname, "rb") as fh:
            raw = fh.read()
    records = {}
    for _ in range(ntiles):
        parts = rd.next("tile")[1:]
        key = (int(parts[0]), int(parts[1]), int(parts[2]))
        n, at = int(parts[3]), int(parts[4])
        ids = np.frombuffer(raw, "<i8", n, at).copy()
        at += 8 * n
        origin = np.frombuffer(raw, "<i4", n, at).copy()
        at += 4 * n
        pos = np.frombuffer(raw, "<f8", n * dim, at).reshape(n, dim).copy()
        at += 8 * n * dim
        rdata = np.frombuffer(raw, "<f8", n * nreal, at).reshape(nreal, n).copy()
        at += 8 * n * nreal
        idata = np.frombuffer(raw, "<i8", n * nint, at).reshape(nint, n).copy()
        records[key] = (ids, origin, pos, rdata, idata)
    return {"dim": dim, "nreal": nreal, "nint": nint}, records


def load_particles_into(pc, path):
    """Replace pc's tiles with the dump's contents (schema must match)."""
    from .particles import ParticleTile

    _, records = read_particles(path, expect_schema=(pc.dim, pc.nreal, pc.nint))
    pc.tiles.clear()
    for key in sorted(records):
        ids, origin, pos, rdata, idata = records[key]
        tile = ParticleTile(pc.dim, pc.nreal, pc.nint, n=len(ids))
        tile.aos["id"] = ids
        tile.aos["origin"] = origin
        tile.aos["pos"] = pos
        tile.rdata = rdata
        tile.idata = idata
        pc.tiles[key] = tile
    pc.epoch += 1


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def write_checkpoint(
    path, meshes, header, step, user_blob=b"", pc=None, mode=None, transport=None
):
    """Hierarchy metadata + level data + opaque payload, restart-complete."""
    os.makedirs(path, exist_ok=True)
    lines = [
        CHECKPOINT_TAG,
        f"step {int(step)}",
        f"time {header.time!r}",
        f"nranks {meshes[0].dm.nranks}",
        f"nlevels {len(meshes)}",
    ]
    for lev, mesh in enumerate(meshes):
        lines.append(f"owners {lev} " + _fmt_ints(mesh.dm))
    lines.append(f"blob {len(user_blob)}")
    lines.append(f"particles {1 if pc is not None else 0}")
    with open(os.path.join(path, "Header"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(path, "blob.bin"), "wb") as fh:
        fh.write(user_blob)
    handle = write_plotfile(os.path.join(path, "mesh"), meshes, header, mode, transport)
    handle.wait()
    if pc is not None:
        write_particles(os.path.join(path, "particles"), pc)


def read_checkpoint(path):
    """{step, time, nranks, owners, header, meshes, blob, particles}."""
    rd = _HeaderReader(os.path.join(path, "Header"))
    if rd.lines[0] != CHECKPOINT_TAG:
        raise ValueError(f"not a checkpoint (version tag {rd.lines[0]!r})")
    rd.at = 1
    step = int(rd.next("step")[1])
    time = float(rd.next("time")[1])
    nranks = int(rd.next("nranks")[1])
    nlevels = int(rd.next("nlevels")[1])
    owners = []
    for lev in range(nlevels):
        owners.append([int(x) for x in rd.next("owners")[2:]])
    nblob = int(rd.next("blob")[1])
    has_pc = bool(int(rd.next("particles")[1]))
    with open(os.path.join(path, "blob.bin"), "rb") as fh:
        blob = fh.read()
    if len(blob) != nblob:
        raise ValueError("checkpoint blob length mismatch")
    header, meshes = read_plotfile(os.path.join(path, "mesh"))
    particles = None
    if has_pc:
        particles = read_particles(os.path.join(path, "particles"))
    return {
        "step": step,
        "time": time,
        "nranks": nranks,
        "owners": owners,
        "header": header,
        "meshes": meshes,
        "blob": blob,
        "particles": particles,
    }
