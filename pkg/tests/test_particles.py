"""Particles: ownership, redistribution, halos, neighbor lists, scans, and
particle-mesh transfer, each against an order-independent oracle."""

import numpy as np
import pytest

from amrkit.amr_core import Geometry
from amrkit.boxarray import BoxArray
from amrkit.distribution import default_costs, sfc_distribute
from amrkit.fabarray import FabArray, gather_global
from amrkit.index_space import Box, IntVect
from amrkit.particles import (
    ParticleContainer,
    ParticleError,
    bin_permutation,
    build_neighbor_list,
    check_locations,
    fill_neighbors,
    keyed_uniforms,
    locate,
    mesh_to_particle,
    partition,
    particle_to_mesh,
    prefix_scan,
    redistribute,
    stream_compact,
    sum_neighbors,
    update_neighbors,
)

DIM = 2


def _setup(rng=None, nranks=1, n=32, dim=DIM, mgs=8, nreal=1, nint=0, periodic=True, tile_size=None):
    domain = Box(IntVect.zero(dim), IntVect([n - 1] * dim))
    geom = Geometry(domain, (0.0,) * dim, (1.0,) * dim, periodic)
    ba = BoxArray([domain]).max_size(mgs)
    dm = sfc_distribute(ba, default_costs(ba), nranks)
    return ParticleContainer([geom], [ba], [dm], nreal=nreal, nint=nint, tile_size=tile_size)


def _inject(pc, pos, **kw):
    n = pos.shape[0]
    ids = kw.pop("ids", np.arange(1, n + 1, dtype=np.int64))
    pc.add_particles(pos, ids=ids, **kw)
    redistribute(pc)
    return ids


# -- ownership ---------------------------------------------------------------


def test_locate_half_open_example():
    pc = _setup(n=8, mgs=8)
    # dx = 1/8; 2.4 cells in = 0.3 physical; floor(2.4) = cell 2
    lev, grid, cell = locate(pc, (0.3, 0.3))
    assert lev == 0 and tuple(cell) == (2, 2)


def test_locate_matches_brute_force(rng):
    pc = _setup(n=16, mgs=4)
    geom = pc.geoms[0]
    for _ in range(300):
        pos = rng.random(DIM)
        lev, grid, cell = locate(pc, pos)
        want = tuple(
            int(np.floor((pos[d] - geom.prob_lo[d]) / geom.cell_size[d]))
            for d in range(DIM)
        )
        assert tuple(cell) == want
        assert pc.bas[0][grid].contains(IntVect(want))


def test_cell_boundary_goes_up():
    # a particle exactly on an interior cell face belongs to the upper cell
    pc = _setup(n=8, mgs=8)
    _, _, cell = locate(pc, (0.25, 0.25))
    assert tuple(cell) == (2, 2)


def test_ids_positive_and_unique(rng):
    pc = _setup(nranks=4)
    pc.add_particles(rng.random((100, DIM)))
    redistribute(pc)
    ids = pc.all_ids()
    assert (ids > 0).all()
    assert len(np.unique(ids)) == 100


def test_check_locations_detects_misfiled(rng):
    pc = _setup()
    _inject(pc, rng.random((50, DIM)))
    assert check_locations(pc) == []
    key = next(iter(pc.sorted_keys()))
    pc.tiles[key].aos["pos"][0] = (0.999, 0.999)
    bad = check_locations(pc)
    assert pc.tiles[key].aos["id"][0] in [b[0] for b in bad] or bad


# -- redistribution ----------------------------------------------------------


def test_redistribute_noop_is_identity(rng):
    pc = _setup(nranks=2)
    _inject(pc, rng.random((200, DIM)))
    before = {k: pc.tiles[k].aos.copy() for k in pc.sorted_keys()}
    redistribute(pc)
    assert pc.sorted_keys() == sorted(before)
    for k in before:
        assert np.array_equal(pc.tiles[k].aos, before[k])


def test_redistribute_periodic_wrap(rng):
    pc = _setup(nranks=2)
    ids = _inject(pc, rng.random((50, DIM)) * 0.05 + 0.01)
    for key in pc.sorted_keys():
        pc.tiles[key].aos["pos"] -= 0.06  # everyone leaves through the low wall
    redistribute(pc)
    assert check_locations(pc) == []
    assert pc.total_valid() == 50
    for key in pc.sorted_keys():
        assert (pc.tiles[key].aos["pos"] >= 0.0).all()


def test_negative_id_removed(rng):
    pc = _setup()
    _inject(pc, rng.random((20, DIM)))
    key = pc.sorted_keys()[0]
    doomed = int(pc.tiles[key].aos["id"][0])
    pc.tiles[key].aos["id"][0] = -doomed
    redistribute(pc)
    assert doomed not in set(pc.all_ids().tolist())
    assert pc.total_valid() == 19


def test_storage_identical_across_rank_counts(rng):
    pos = rng.random((300, DIM))
    layouts = []
    for nranks in (1, 2, 4):
        pc = _setup(nranks=nranks)
        _inject(pc, pos.copy())
        layouts.append(
            {
                k: (t.aos["id"].copy(), t.aos["pos"].copy())
                for k, t in pc.tiles.items()
                if t.size
            }
        )
    for other in layouts[1:]:
        assert sorted(other) == sorted(layouts[0])
        for k in layouts[0]:
            assert np.array_equal(layouts[0][k][0], other[k][0])
            assert np.array_equal(layouts[0][k][1], other[k][1])


def test_local_mode_rejects_teleport(rng):
    pc = _setup(mgs=8)
    _inject(pc, rng.random((30, DIM)) * 0.2)  # all in the first grid
    for key in pc.sorted_keys():
        pc.tiles[key].aos["pos"][0] = (0.93, 0.93)  # far outside grid+k cells
    with pytest.raises(ParticleError):
        redistribute(pc, mode="local", k=1)


def test_local_mode_accepts_short_hops(rng):
    pc = _setup(mgs=8)
    _inject(pc, rng.random((100, DIM)))
    dx = pc.geoms[0].cell_size[0]
    for key in pc.sorted_keys():
        t = pc.tiles[key]
        # no pre-wrapping: redistribute owns the periodic wrap, and the
        # displacement check runs on the raw positions
        t.aos["pos"] = t.aos["pos"] + 0.9 * dx
    redistribute(pc, mode="local", k=1)
    assert check_locations(pc) == []
    assert pc.total_valid() == 100


def test_soak_multiset_identical_across_ranks(rng):
    # short soak; the long 500-step version runs in the acceptance suite
    pos = rng.random((150, DIM))
    results = {}
    for nranks in (1, 4):
        pc = _setup(nranks=nranks)
        ids = _inject(pc, pos.copy())
        for step in range(40):
            u = keyed_uniforms(3, step, ids, ncomp=DIM)
            delta = (2.0 * u - 1.0) * 0.04
            for key in pc.sorted_keys():
                t = pc.tiles[key]
                if t.size:
                    t.aos["pos"] = (t.aos["pos"] + delta[t.aos["id"] - 1]) % 1.0
            redistribute(pc)
        results[nranks] = sorted(pc.id_positions().items())
    assert results[1] == results[4]


# -- scans -------------------------------------------------------------------


def test_prefix_scan_matches_numpy(rng):
    vals = rng.integers(0, 10, size=1000).astype(np.int64)
    out = np.zeros_like(vals)

    def run(kind, chunk):
        total = prefix_scan(
            len(vals),
            lambda i: vals[i],
            lambda i, v: out.__setitem__(i, v),
            kind=kind,
            chunk=chunk,
        )
        return total, out.copy()

    t1, ex = run("exclusive", 64)
    assert t1 == vals.sum()
    assert np.array_equal(ex, np.concatenate([[0], np.cumsum(vals)[:-1]]))
    t2, inc = run("inclusive", 37)
    assert np.array_equal(inc, np.cumsum(vals))
    assert t2 == vals.sum()


def test_prefix_scan_chunk_size_invariant(rng):
    vals = rng.normal(size=513)
    outs = []
    for chunk in (1, 7, 64, 10000):
        out = np.zeros_like(vals)
        prefix_scan(
            len(vals),
            lambda i: vals[i],
            lambda i, v: out.__setitem__(i, v),
            chunk=chunk,
        )
        outs.append(out.copy())
    for other in outs[1:]:
        assert np.array_equal(outs[0], other)  # bitwise, not approximate


def test_bin_permutation_example():
    counts, offsets, perm = bin_permutation(np.array([2, 0, 1, 0]), 3)
    assert counts.tolist() == [2, 1, 1]
    assert offsets.tolist() == [0, 2, 3]
    assert perm.tolist() == [1, 3, 2, 0]


def test_bin_permutation_groups_stable(rng):
    cells = rng.integers(0, 16, size=1000)
    counts, offsets, perm = bin_permutation(cells, 16)
    assert counts.sum() == 1000
    binned = cells[perm]
    assert (np.diff(binned) >= 0).all()
    # stability: equal bins keep original relative order
    for b in range(16):
        idx = perm[offsets[b] : offsets[b] + counts[b]]
        assert (np.diff(idx) > 0).all()


def test_compact_and_partition(rng):
    vals = rng.integers(0, 100, size=500)
    keep = lambda i: vals[i] % 3 == 0
    kept, idx = stream_compact(len(vals), keep)
    want = np.nonzero(vals % 3 == 0)[0]
    assert kept == len(want)
    assert np.array_equal(np.asarray(idx), want)
    nkept, perm = partition(len(vals), keep)
    assert nkept == len(want)
    assert np.array_equal(np.asarray(perm[:nkept]), want)
    assert sorted(perm) == list(range(500))


# -- halos and neighbor lists --------------------------------------------------


def test_halo_update_propagates_moves(rng):
    pc = _setup(nranks=2, nreal=1)
    pos = rng.random((200, DIM))
    ids = _inject(pc, pos, rdata=pos[:, :1].T.copy())
    halo = fill_neighbors(pc, nghost=2)
    # move owners slightly, then update; ghost copies must follow
    for key in pc.sorted_keys():
        t = pc.tiles[key]
        t.aos["pos"] = np.clip(t.aos["pos"] + 1e-4, 0.0, 0.999999)
        t.rdata[0] = t.aos["pos"][:, 0]
    update_neighbors(pc, halo)
    owned = pc.id_positions()
    dx = np.asarray(pc.geoms[0].cell_size)
    for key in sorted(halo.tiles):
        ht = halo.tiles[key]
        for k in range(ht.size):
            pid = int(ht.ids[k])
            want = np.asarray(owned[pid]) + ht.shift[k] * dx
            assert np.allclose(ht.pos[k], want, rtol=0, atol=1e-15)
            assert ht.rdata[0, k] == owned[pid][0]


def test_stale_halo_rejected(rng):
    pc = _setup()
    _inject(pc, rng.random((50, DIM)))
    halo = fill_neighbors(pc, nghost=1)
    redistribute(pc)  # bumps the epoch
    with pytest.raises(ParticleError):
        update_neighbors(pc, halo)


def test_sum_neighbors_accumulates_ghost_contributions(rng):
    pc = _setup(nranks=2, nreal=1)
    pos = rng.random((150, DIM))
    _inject(pc, pos, rdata=np.zeros((1, 150)))
    halo = fill_neighbors(pc, nghost=2)
    # write 1.0 into every ghost copy, then fold back: each particle must
    # receive exactly its number of ghost replicas
    replica_count = {}
    for key in sorted(halo.tiles):
        ht = halo.tiles[key]
        ht.rdata[0, :] = 1.0
        for k in range(ht.size):
            pid = int(ht.ids[k])
            replica_count[pid] = replica_count.get(pid, 0) + 1
    sum_neighbors(pc, halo, comp=0)
    for key in pc.sorted_keys():
        t = pc.tiles[key]
        for k in range(t.size):
            pid = int(t.aos["id"][k])
            assert t.rdata[0, k] == float(replica_count.get(pid, 0))


def test_neighbor_list_matches_n_squared(rng):
    cutoff_cells = 1
    for trial in range(5):
        pc = _setup(n=16, mgs=8, nranks=2)
        npart = 400
        pos = rng.random((npart, DIM))
        ids = _inject(pc, pos)
        dx = pc.geoms[0].cell_size[0]
        cutoff = cutoff_cells * dx
        halo = fill_neighbors(pc, nghost=cutoff_cells)
        nl = build_neighbor_list(pc, halo, cutoff)
        got = set(map(tuple, nl.id_pairs()))
        want = set()
        ppos = pc.id_positions()
        keys = sorted(ppos)
        for i, a in enumerate(keys):
            for b in keys[i + 1 :]:
                d = np.abs(np.asarray(ppos[a]) - np.asarray(ppos[b]))
                d = np.minimum(d, 1.0 - d)  # periodic metric
                if (d * d).sum() <= cutoff * cutoff:
                    want.add((a, b))
        assert got == want


def test_neighbor_list_predicate_replaces_distance_filter(rng):
    pc = _setup(n=16, mgs=8)
    pos = rng.random((400, DIM))
    _inject(pc, pos)
    dx = pc.geoms[0].cell_size[0]
    halo = fill_neighbors(pc, nghost=1)
    # a tighter distance predicate must reproduce a plain build at the
    # tighter cutoff, independent of the candidate bin size
    tight = 0.5 * dx
    pred = lambda pa, pb: ((pa - pb) ** 2).sum(axis=1) <= tight * tight
    filtered = build_neighbor_list(pc, halo, dx, predicate=pred)
    direct = build_neighbor_list(pc, halo, tight)
    assert set(map(tuple, filtered.id_pairs())) == set(map(tuple, direct.id_pairs()))


# -- particle-mesh -----------------------------------------------------------


def test_ngp_deposit_counts_cells(rng):
    pc = _setup(n=8, mgs=8)
    pos = rng.random((64, DIM))
    _inject(pc, pos)
    mesh = FabArray(pc.bas[0], pc.dms[0], 1, 1)
    particle_to_mesh(pc, mesh, kernel="ngp")
    g = gather_global(mesh, pc.geoms[0].domain)
    want = np.zeros_like(g)
    for p in pos:
        c = tuple(int(v * 8) for v in p)
        want[c] += 1.0
    assert np.array_equal(g, want)


def test_cic_corner_particle_spreads_quarters():
    pc = _setup(n=8, mgs=8)
    pc.add_particles(np.array([[0.25, 0.25]]), ids=np.array([1], dtype=np.int64))
    redistribute(pc)
    mesh = FabArray(pc.bas[0], pc.dms[0], 1, 1)
    particle_to_mesh(pc, mesh, kernel="cic")
    g = gather_global(mesh, pc.geoms[0].domain)
    want = np.zeros((8, 8))
    want[1:3, 1:3] = 0.25
    assert np.allclose(g, want, rtol=0, atol=1e-15)


def test_cic_conserves_and_rank_invariant(rng):
    pos = rng.random((500, DIM))
    w = rng.random(500) + 0.5
    results = []
    for nranks in (1, 2, 4):
        pc = _setup(nranks=nranks, nreal=1)
        _inject(pc, pos.copy(), rdata=w[None, :].copy())
        mesh = FabArray(pc.bas[0], pc.dms[0], 1, 1)
        particle_to_mesh(pc, mesh, kernel="cic", weight=0)
        g = gather_global(mesh, pc.geoms[0].domain)
        results.append(g)
        assert abs(g.sum() - w.sum()) <= 1e-12 * w.sum()
    assert np.array_equal(results[0], results[1])
    assert np.array_equal(results[0], results[2])


def test_cic_gather_reproduces_linear_field(rng):
    pc = _setup(n=16, mgs=8, nreal=1, periodic=False)
    # interior particles only, away from the domain frame
    pos = 0.25 + 0.5 * rng.random((200, DIM))
    _inject(pc, pos, rdata=np.zeros((1, 200)))
    mesh = FabArray(pc.bas[0], pc.dms[0], 1, 1)
    geom = pc.geoms[0]
    for i in range(len(mesh.ba)):
        b = mesh.ba[i]
        arr = mesh.fab(i).valid(0)
        for c in b.cells():
            x = geom.cell_center(IntVect(c))
            arr[tuple(c[d] - b.lo[d] for d in range(DIM))] = 3.0 * x[0] - 2.0 * x[1]
    mesh_to_particle(pc, mesh, kernel="cic", out_comp=0)
    for key in pc.sorted_keys():
        t = pc.tiles[key]
        for k in range(t.size):
            x = t.aos["pos"][k]
            assert abs(t.rdata[0, k] - (3.0 * x[0] - 2.0 * x[1])) < 1e-12


def test_dual_grid_deposit_matches_single_grid(rng):
    # particles balanced on their own layout deposit onto the mesh layout
    # with the same result as a shared layout
    dim = DIM
    domain = Box(IntVect.zero(dim), IntVect(15, 15))
    geom = Geometry(domain, (0.0,) * dim, (1.0,) * dim, True)
    mesh_ba = BoxArray([domain]).max_size(8)
    part_ba = BoxArray([domain]).max_size(4)
    dm_m = sfc_distribute(mesh_ba, default_costs(mesh_ba), 2)
    dm_p = sfc_distribute(part_ba, default_costs(part_ba), 2)
    pc = ParticleContainer([geom], [part_ba], [dm_p], nreal=1)
    pos = rng.random((300, dim))
    w = rng.random(300)
    pc.add_particles(pos, rdata=w[None, :], ids=np.arange(1, 301, dtype=np.int64))
    redistribute(pc)
    mesh = FabArray(mesh_ba, dm_m, 1, 1)
    particle_to_mesh(pc, mesh, kernel="cic", weight=0, dual_grid=True)
    got = gather_global(mesh, domain)

    pc2 = _setup(n=16, mgs=8, nranks=2, nreal=1)
    pc2.add_particles(pos, rdata=w[None, :], ids=np.arange(1, 301, dtype=np.int64))
    redistribute(pc2)
    mesh2 = FabArray(pc2.bas[0], pc2.dms[0], 1, 1)
    particle_to_mesh(pc2, mesh2, kernel="cic", weight=0)
    assert np.allclose(got, gather_global(mesh2, domain), rtol=0, atol=1e-13)


def test_keyed_uniforms_order_independent():
    ids = np.array([5, 9, 2], dtype=np.int64)
    a = keyed_uniforms(11, 3, ids, ncomp=2)
    b = keyed_uniforms(11, 3, ids[::-1].copy(), ncomp=2)
    assert np.array_equal(a, b[::-1])
    c = keyed_uniforms(12, 3, ids, ncomp=2)
    assert not np.array_equal(a, c)
    assert (a >= 0).all() and (a < 1).all()
