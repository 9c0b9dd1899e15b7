"""On-disk formats: plotfiles, particle dumps, checkpoints.  Byte-level
determinism is the contract: the same data must serialize to the same bytes
no matter how many ranks or writer threads produced it."""

import hashlib
import os

import numpy as np
import pytest

from amrkit import counters
from amrkit.advect import (
    AdvectionSolver,
    load_solver_checkpoint,
    save_solver_checkpoint,
)
from amrkit.amr_core import Geometry, GridGenParams
from amrkit.boxarray import BoxArray
from amrkit.distribution import default_costs, sfc_distribute
from amrkit.fabarray import FabArray, gather_global
from amrkit.index_space import Box, IntVect
from amrkit.particles import ParticleContainer, redistribute
from amrkit.plotfile import (
    OutputMode,
    PlotfileHeader,
    load_particles_into,
    read_checkpoint,
    read_particles,
    read_plotfile,
    write_checkpoint,
    write_particles,
    write_plotfile,
)


def _dir_digest(path):
    h = hashlib.sha256()
    for root, dirs, files in os.walk(path):
        dirs.sort()
        for name in sorted(files):
            full = os.path.join(root, name)
            h.update(os.path.relpath(full, path).encode())
            with open(full, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


def _two_level(rng, nranks=1, n=16, dim=2):
    domain = Box(IntVect.zero(dim), IntVect([n - 1] * dim))
    geom0 = Geometry(domain, (0.0,) * dim, (1.0,) * dim, (True,) * dim)
    ba0 = BoxArray([domain]).max_size(8)
    dm0 = sfc_distribute(ba0, default_costs(ba0), nranks)
    fine_region = Box(IntVect([n // 2] * dim), IntVect([n + n // 2 - 1] * dim))
    ba1 = BoxArray([fine_region]).max_size(8)
    dm1 = sfc_distribute(ba1, default_costs(ba1), nranks)
    geom1 = geom0.refine(IntVect([2] * dim))
    meshes = []
    for ba, dm in ((ba0, dm0), (ba1, dm1)):
        fa = FabArray(ba, dm, 2, 0)
        for g in range(len(ba)):
            for c in range(2):
                seed_local = np.random.default_rng(hash((g, c)) % 2**32)
                fa.fab(g).valid(c)[...] = seed_local.normal(
                    size=tuple(ba[g].extents())
                )
        meshes.append(fa)
    header = PlotfileHeader(0.625, ["density", "tracer"], [geom0, geom1])
    return header, meshes


# -- plotfiles -----------------------------------------------------------------


def test_plotfile_round_trip(rng, tmp_path):
    header, meshes = _two_level(rng)
    path = str(tmp_path / "plt")
    write_plotfile(path, meshes, header).wait()
    got_header, got_meshes = read_plotfile(path)
    assert got_header.time == header.time
    assert got_header.names == header.names
    assert len(got_meshes) == 2
    for lev in range(2):
        g0 = header.geoms[lev]
        g1 = got_header.geoms[lev]
        assert g1.domain == g0.domain
        assert g1.prob_lo == g0.prob_lo and g1.prob_hi == g0.prob_hi
        assert g1.periodic == g0.periodic
        dom = g0.domain
        for c in range(2):
            assert np.array_equal(
                gather_global(got_meshes[lev], dom, comp=c),
                gather_global(meshes[lev], dom, comp=c),
            )


def test_header_rejects_spaces_in_names():
    with pytest.raises(ValueError):
        PlotfileHeader(0.0, ["bad name"], [])


def test_bytes_deterministic_and_layout_independent(rng, tmp_path):
    digests = set()
    for nranks, nwriters in ((1, 1), (2, 1), (4, 2), (4, 4), (8, 3)):
        header, meshes = _two_level(rng, nranks=nranks)
        path = str(tmp_path / f"plt_r{nranks}_w{nwriters}")
        write_plotfile(path, meshes, header, OutputMode.static(nwriters)).wait()
        digests.add(_dir_digest(path))
    assert len(digests) == 1
    # and writing the same thing twice is bit-identical
    header, meshes = _two_level(rng)
    a, b = str(tmp_path / "rep_a"), str(tmp_path / "rep_b")
    write_plotfile(a, meshes, header).wait()
    write_plotfile(b, meshes, header).wait()
    assert _dir_digest(a) == _dir_digest(b)


def test_wave_and_peak_writer_counters(rng, tmp_path):
    header, meshes = _two_level(rng, nranks=4)
    counters.reset("io_waves", "io_peak_writers", "io_bytes_written")
    write_plotfile(
        str(tmp_path / "plt"), meshes, header, OutputMode.static(2)
    ).wait()
    # 4 ranks in groups of 2 -> 2 waves per level, never more than 2 writers
    assert counters.get("io_waves") == 2 * len(meshes)
    assert counters.get("io_peak_writers") == 2
    assert counters.get("io_bytes_written") > 0


def test_single_writer_serializes(rng, tmp_path):
    header, meshes = _two_level(rng, nranks=4)
    counters.reset("io_waves", "io_peak_writers")
    write_plotfile(str(tmp_path / "plt"), meshes, header, OutputMode.static(1)).wait()
    assert counters.get("io_waves") == 4 * len(meshes)
    assert counters.get("io_peak_writers") == 1


def test_async_same_bytes_as_static(rng, tmp_path):
    header, meshes = _two_level(rng, nranks=2)
    a, b = str(tmp_path / "sync"), str(tmp_path / "async")
    write_plotfile(a, meshes, header, OutputMode.static(1)).wait()
    h = write_plotfile(b, meshes, header, OutputMode.asynchronous())
    h.wait()
    assert h.done
    assert _dir_digest(a) == _dir_digest(b)


def test_async_snapshot_isolation(rng, tmp_path):
    header, meshes = _two_level(rng)
    want = [gather_global(m, g.domain) for m, g in zip(meshes, header.geoms)]
    path = str(tmp_path / "plt")
    h = write_plotfile(path, meshes, header, OutputMode.asynchronous())
    for m in meshes:  # mutate immediately after submit, before waiting
        for g in range(len(m.ba)):
            m.fab(g).valid()[...] = -1234.5
    h.wait()
    _, got = read_plotfile(path)
    for lev in range(2):
        assert np.array_equal(
            gather_global(got[lev], header.geoms[lev].domain), want[lev]
        )


def test_async_error_surfaces_on_wait(rng, tmp_path):
    header, meshes = _two_level(rng)
    blocker = tmp_path / "blocker"
    blocker.write_text("a file, not a directory")
    h = write_plotfile(
        str(blocker / "plt"), meshes, header, OutputMode.asynchronous()
    )
    with pytest.raises(OSError):
        h.wait()


def test_async_queue_drains_in_order(rng, tmp_path):
    # back-to-back submissions; the single worker with a depth-one queue
    # must complete all of them correctly
    handles = []
    wants = []
    for k in range(3):
        header, meshes = _two_level(rng)
        path = str(tmp_path / f"plt{k}")
        wants.append((path, gather_global(meshes[0], header.geoms[0].domain)))
        handles.append(write_plotfile(path, meshes, header, OutputMode.asynchronous()))
    for h in handles:
        h.wait()
    for path, want in wants:
        _, got = read_plotfile(path)
        assert np.array_equal(gather_global(got[0], Box(IntVect(0, 0), IntVect(15, 15))), want)


def test_read_rejects_wrong_tag(rng, tmp_path):
    header, meshes = _two_level(rng)
    path = str(tmp_path / "plt")
    write_plotfile(path, meshes, header).wait()
    hdr = os.path.join(path, "Header")
    lines = open(hdr).read().splitlines()
    lines[0] = "someone-elses-format-9"
    open(hdr, "w").write("\n".join(lines) + "\n")
    with pytest.raises(ValueError):
        read_plotfile(path)


# -- particle dumps --------------------------------------------------------------


def _particle_setup(rng, nranks, n=300):
    dim = 2
    domain = Box(IntVect.zero(dim), IntVect(15, 15))
    geom = Geometry(domain, (0.0,) * dim, (1.0,) * dim, (True,) * dim)
    ba = BoxArray([domain]).max_size(8)
    dm = sfc_distribute(ba, default_costs(ba), nranks)
    pc = ParticleContainer([geom], [ba], [dm], nreal=1, nint=1)
    return pc


def test_particle_dump_round_trip(rng, tmp_path):
    pc = _particle_setup(rng, nranks=4)
    n = 300
    pos = rng.random((n, 2))
    pc.add_particles(
        pos,
        rdata=rng.random((1, n)),
        idata=rng.integers(0, 99, (1, n)),
        ids=np.arange(1, n + 1, dtype=np.int64),
    )
    redistribute(pc)
    path = str(tmp_path / "particles")
    write_particles(path, pc)
    meta, records = read_particles(path)
    assert meta == {"dim": 2, "nreal": 1, "nint": 1}
    assert sorted(records) == [k for k in pc.sorted_keys() if pc.tiles[k].size]
    for key, (ids, origin, ppos, rdata, idata) in records.items():
        t = pc.tiles[key]
        assert np.array_equal(ids, t.aos["id"])
        assert np.array_equal(origin, t.aos["origin"])
        assert np.array_equal(ppos, t.aos["pos"])
        assert np.array_equal(rdata, t.rdata)
        assert np.array_equal(idata, t.idata)


def test_particle_dump_bytes_rank_independent(rng, tmp_path):
    n = 200
    pos = rng.random((n, 2))
    w = rng.random((1, n))
    digests = set()
    for nranks in (1, 2, 4):
        pc = _particle_setup(rng, nranks=nranks)
        pc.add_particles(pos.copy(), rdata=w.copy(),
                         idata=np.zeros((1, n), dtype=np.int64),
                         ids=np.arange(1, n + 1, dtype=np.int64))
        redistribute(pc)
        path = str(tmp_path / f"p{nranks}")
        write_particles(path, pc)
        digests.add(_dir_digest(path))
    assert len(digests) == 1


def test_particle_dump_reload_into_container(rng, tmp_path):
    src = _particle_setup(rng, nranks=4)
    n = 150
    src.add_particles(
        rng.random((n, 2)),
        rdata=rng.random((1, n)),
        idata=rng.integers(-5, 5, (1, n)),
        ids=np.arange(1, n + 1, dtype=np.int64),
    )
    redistribute(src)
    path = str(tmp_path / "dump")
    write_particles(path, src)
    dst = _particle_setup(rng, nranks=1)
    epoch_before = dst.epoch
    load_particles_into(dst, path)
    assert dst.epoch > epoch_before
    assert dst.id_positions() == src.id_positions()
    assert dst.total_valid() == n


def test_empty_particle_dump(rng, tmp_path):
    pc = _particle_setup(rng, nranks=2)
    path = str(tmp_path / "empty")
    write_particles(path, pc)
    meta, records = read_particles(path)
    assert records == {}
    dst = _particle_setup(rng, nranks=1)
    load_particles_into(dst, path)
    assert dst.total_valid() == 0


def test_particle_schema_mismatch_raises(rng, tmp_path):
    pc = _particle_setup(rng, nranks=1)
    pc.add_particles(rng.random((10, 2)), rdata=rng.random((1, 10)),
                     idata=np.zeros((1, 10), dtype=np.int64))
    redistribute(pc)
    path = str(tmp_path / "dump")
    write_particles(path, pc)
    with pytest.raises(ValueError):
        read_particles(path, expect_schema=(2, 3, 1))
    dim2 = 2
    wrong = ParticleContainer(pc.geoms, pc.bas, pc.dms, nreal=2, nint=1)
    with pytest.raises(ValueError):
        load_particles_into(wrong, path)


# -- checkpoints ------------------------------------------------------------------


def test_checkpoint_round_trip(rng, tmp_path):
    header, meshes = _two_level(rng, nranks=4)
    pc = _particle_setup(rng, nranks=4)
    pc.add_particles(rng.random((60, 2)), rdata=rng.random((1, 60)),
                     idata=np.zeros((1, 60), dtype=np.int64),
                     ids=np.arange(1, 61, dtype=np.int64))
    redistribute(pc)
    blob = b"opaque solver payload \x00\x01\x02"
    path = str(tmp_path / "chk")
    write_checkpoint(path, meshes, header, step=17, user_blob=blob, pc=pc)
    data = read_checkpoint(path)
    assert data["step"] == 17
    assert data["time"] == header.time
    assert data["nranks"] == 4
    assert data["blob"] == blob
    assert data["owners"] == [list(m.dm) for m in meshes]
    for lev in range(2):
        dom = header.geoms[lev].domain
        assert np.array_equal(
            gather_global(data["meshes"][lev], dom),
            gather_global(meshes[lev], dom),
        )
    _, records = data["particles"]
    total = sum(len(r[0]) for r in records.values())
    assert total == 60


def test_checkpoint_bytes_deterministic(rng, tmp_path):
    header, meshes = _two_level(rng, nranks=2)
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    write_checkpoint(a, meshes, header, step=3, user_blob=b"xyz")
    write_checkpoint(b, meshes, header, step=3, user_blob=b"xyz")
    assert _dir_digest(a) == _dir_digest(b)


def test_checkpoint_version_mismatch(rng, tmp_path):
    header, meshes = _two_level(rng)
    path = str(tmp_path / "chk")
    write_checkpoint(path, meshes, header, step=0)
    hdr = os.path.join(path, "Header")
    lines = open(hdr).read().splitlines()
    lines[0] = "amrkit-checkpoint-999"
    open(hdr, "w").write("\n".join(lines) + "\n")
    with pytest.raises(ValueError):
        read_checkpoint(path)


# -- solver restart -----------------------------------------------------------------


def _solver(nranks):
    dim = 2
    n = 32
    domain = Box(IntVect.zero(dim), IntVect([n - 1] * dim))
    geom = Geometry(domain, (0.0,) * dim, (1.0,) * dim, (True,) * dim)
    params = GridGenParams(dim=dim, max_level=1, max_grid_size=8, blocking_factor=4)
    return AdvectionSolver(geom, params, velocity=(1.0, 0.5), nranks=nranks,
                           cfl=0.4, tag_threshold=0.5, regrid_interval=4)


def _phi_state(solver):
    out = []
    for lev in range(solver.hier.finest_level + 1):
        fa = solver.hier.field("phi", lev)
        dom = solver.hier.geom(lev).domain
        out.append(gather_global(fa, dom))
    return out


def test_restart_twin_matches_uninterrupted(tmp_path):
    ref = _solver(nranks=2)
    for _ in range(20):
        ref.step()
    want = _phi_state(ref)

    half = _solver(nranks=2)
    for _ in range(10):
        half.step()
    path = str(tmp_path / "chk")
    save_solver_checkpoint(half, path)

    twin = load_solver_checkpoint(path)
    assert twin.step_count == 10
    assert twin.time == half.time
    for _ in range(10):
        twin.step()
    got = _phi_state(twin)
    assert len(got) == len(want)
    for lev in range(len(want)):
        assert np.array_equal(got[lev], want[lev])  # bitwise


def test_restart_across_rank_counts(tmp_path):
    ref = _solver(nranks=2)
    for _ in range(20):
        ref.step()
    want = _phi_state(ref)

    half = _solver(nranks=2)
    for _ in range(10):
        half.step()
    path = str(tmp_path / "chk")
    save_solver_checkpoint(half, path)

    twin = load_solver_checkpoint(path, nranks=4)
    assert twin.hier.field("phi", 0).dm.nranks == 4
    for _ in range(10):
        twin.step()
    got = _phi_state(twin)
    for lev in range(len(want)):
        assert np.array_equal(got[lev], want[lev])
