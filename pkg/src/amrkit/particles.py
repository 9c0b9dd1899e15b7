"""Distributed particles: tiled containers, redistribution, halo exchange,
neighbor lists, scan/compaction utilities, and particle-mesh transfer.

Conventions pinned here:
  * Cells are half-open: a particle at physical x lives in cell
    floor((x - prob_lo)/dx), so ownership on grid seams is unambiguous.
  * ids are positive and unique (per-origin counters interleaved round-robin
    over ranks); a negative id marks a particle for removal at the next
    redistribute.
  * Tiles are fixed index-space sub-boxes anchored at each grid's lo corner,
    so a particle's tile follows from its cell alone.  Tiles are separate
    storage, not views: each holds its own particle-major record array and
    component-major extras.
  * Every tile is kept sorted by id.  Arrival order during exchanges then
    never leaks into storage order, which makes per-tile loops (deposition
    included) independent of the rank count.
"""

from __future__ import annotations

import numpy as np

from . import counters, kernels
from .boxarray import BoxArray
from .fabarray import (
    FabArray,
    Fab,
    fill_boundary,
    parallel_copy,
    sum_boundary,
    _periodic_shifts,
)
from .index_space import Box, IntVect
from .transport import Transport


class ParticleError(RuntimeError):
    def __init__(self, message, ids=()):
        ids = sorted(int(i) for i in ids)
        if ids:
            message = f"{message}: ids {ids}"
        super().__init__(message)
        self.ids = ids


def _aos_dtype(dim):
    return np.dtype(
        [("pos", np.float64, (dim,)), ("id", np.int64), ("origin", np.int32)]
    )


class _Packed(list):
    """Message payload: a list of tuples whose array members count as bytes."""

    @property
    def nbytes(self):
        total = 0
        for entry in self:
            for part in entry:
                total += getattr(part, "nbytes", 0)
        return total


# ---------------------------------------------------------------------------
# tiles
# ---------------------------------------------------------------------------


class ParticleTile:
    """Storage for one (level, grid, tile) bucket.

    Particle-major records (pos, id, origin) live in one structured array;
    schema-declared extras live in component-major rows alongside, always
    index-aligned with the records.
    """

    __slots__ = ("aos", "rdata", "idata")

    def __init__(self, dim, nreal, nint, n=0):
        self.aos = np.zeros(n, dtype=_aos_dtype(dim))
        self.rdata = np.zeros((nreal, n))
        self.idata = np.zeros((nint, n), dtype=np.int64)

    @property
    def size(self):
        return self.aos.shape[0]

    def keep(self, mask):
        self.aos = self.aos[mask]
        self.rdata = self.rdata[:, mask]
        self.idata = self.idata[:, mask]

    def extend(self, aos, rdata, idata):
        self.aos = np.concatenate([self.aos, aos])
        self.rdata = np.concatenate([self.rdata, rdata], axis=1)
        self.idata = np.concatenate([self.idata, idata], axis=1)

    def sort_by_id(self):
        order = np.argsort(self.aos["id"], kind="stable")
        self.aos = self.aos[order]
        self.rdata = self.rdata[:, order]
        self.idata = self.idata[:, order]

    def take(self, sel):
        """Copies of the records and extras at the selected indices."""
        return self.aos[sel].copy(), self.rdata[:, sel].copy(), self.idata[:, sel].copy()


def _tile_counts(box, tsz):
    ext = box.extents()
    return tuple((ext[d] + tsz[d] - 1) // tsz[d] for d in range(box.dim))


def _tile_ids_for_cells(box, tsz, cells):
    """Linear tile id (row-major over the tile lattice) for each cell row."""
    counts = _tile_counts(box, tsz)
    lin = np.zeros(cells.shape[0], dtype=np.int64)
    for d in range(box.dim):
        t = (cells[:, d] - box.lo[d]) // tsz[d]
        lin = lin * counts[d] + t
    return lin


def tile_box_of(box, tsz, tid):
    """The index-space region of tile tid inside box (anchored at box.lo)."""
    counts = _tile_counts(box, tsz)
    coords = []
    rem = int(tid)
    for d in range(box.dim - 1, -1, -1):
        coords.append(rem % counts[d])
        rem //= counts[d]
    coords.reverse()
    lo = IntVect(box.lo[d] + coords[d] * tsz[d] for d in range(box.dim))
    hi = IntVect(
        min(box.lo[d] + (coords[d] + 1) * tsz[d] - 1, box.hi[d])
        for d in range(box.dim)
    )
    return Box(lo, hi, box.ixtype)


# ---------------------------------------------------------------------------
# container
# ---------------------------------------------------------------------------


class ParticleContainer:
    """Per-level particle storage over (BoxArray, DistributionMapping) pairs.

    The layouts may differ from any mesh's layouts (dual grid); transfer ops
    bridge the two with temporary FabArrays.  Like FabArray, the container
    holds every rank's tiles in-process; ownership is the distribution map's
    say, and cross-rank motion runs through a Transport.
    """

    def __init__(self, geoms, bas, dms, nreal=0, nint=0, tile_size=None):
        if not isinstance(geoms, (list, tuple)):
            geoms, bas, dms = [geoms], [bas], [dms]
        if not (len(geoms) == len(bas) == len(dms) > 0):
            raise ValueError("need one (geometry, layout, mapping) triple per level")
        self.geoms = list(geoms)
        self.bas = list(bas)
        self.dms = list(dms)
        self.nranks = self.dms[0].nranks
        if any(dm.nranks != self.nranks for dm in self.dms):
            raise ValueError("all levels must share one rank count")
        dim = self.geoms[0].dim
        if tile_size is None:
            tile_size = IntVect((1 << 30,) * dim)
        elif isinstance(tile_size, int):
            tile_size = IntVect((tile_size,) * dim)
        elif not isinstance(tile_size, IntVect):
            tile_size = IntVect(tile_size)
        if any(t < 1 for t in tile_size):
            raise ValueError("tile size must be >= 1 per dimension")
        self.tile_size = tile_size
        self.nreal = int(nreal)
        self.nint = int(nint)
        self.tiles = {}
        self.epoch = 0
        self._next = [0] * self.nranks
        self._tile_layouts = {}

    @property
    def dim(self):
        return self.geoms[0].dim

    @property
    def nlevels(self):
        return len(self.geoms)

    def make_ids(self, n, origin_rank=0):
        base = self._next[origin_rank]
        self._next[origin_rank] += n
        return (base + np.arange(n, dtype=np.int64)) * self.nranks + origin_rank + 1

    def tile(self, level, grid, tid, create=False):
        key = (int(level), int(grid), int(tid))
        t = self.tiles.get(key)
        if t is None and create:
            t = ParticleTile(self.dim, self.nreal, self.nint)
            self.tiles[key] = t
        return t

    def sorted_keys(self):
        return sorted(self.tiles)

    def total_valid(self):
        return sum(int((t.aos["id"] > 0).sum()) for t in self.tiles.values())

    def all_ids(self):
        parts = [t.aos["id"] for t in self.tiles.values()] or [np.empty(0, np.int64)]
        return np.sort(np.concatenate(parts))

    def id_positions(self):
        """Mapping id -> position tuple over every stored particle."""
        out = {}
        for t in self.tiles.values():
            for rec in t.aos:
                out[int(rec["id"])] = tuple(float(x) for x in rec["pos"])
        return out

    def tile_layout(self, level):
        """BoxArray of every tile region on a level plus its key mapping."""
        ba = self.bas[level]
        token = (level, ba.uid, self.tile_size.coords)
        hit = self._tile_layouts.get(token)
        if hit is not None:
            return hit
        boxes, keys = [], []
        for g in range(len(ba)):
            counts = _tile_counts(ba[g], self.tile_size)
            ntiles = int(np.prod(counts))
            for tid in range(ntiles):
                boxes.append(tile_box_of(ba[g], self.tile_size, tid))
                keys.append((g, tid))
        layout = (BoxArray(boxes, validate=False), keys)
        self._tile_layouts[token] = layout
        return layout

    def add_particles(self, pos, rdata=None, idata=None, ids=None, origin_rank=0):
        """Insert particles at their located (level, grid, tile) buckets."""
        pos = np.atleast_2d(np.asarray(pos, dtype=np.float64))
        n = pos.shape[0]
        if ids is None:
            ids = self.make_ids(n, origin_rank)
        ids = np.asarray(ids, dtype=np.int64)
        aos = np.zeros(n, dtype=_aos_dtype(self.dim))
        aos["id"] = ids
        aos["origin"] = origin_rank
        rdata = np.zeros((self.nreal, n)) if rdata is None else np.asarray(rdata, float)
        idata = (
            np.zeros((self.nint, n), dtype=np.int64)
            if idata is None
            else np.asarray(idata, np.int64)
        )
        levels, grids, cells, wrapped = _locate_arrays(self, pos, ids)
        aos["pos"] = wrapped
        _scatter(self, aos, rdata, idata, levels, grids, cells)
        self.epoch += 1


def _scatter(pc, aos, rdata, idata, levels, grids, cells):
    tids = np.empty(len(aos), dtype=np.int64)
    for lg in set(zip(levels.tolist(), grids.tolist())):
        sel = (levels == lg[0]) & (grids == lg[1])
        tids[sel] = _tile_ids_for_cells(pc.bas[lg[0]][lg[1]], pc.tile_size, cells[sel])
    order = np.lexsort((tids, grids, levels))
    touched = set()
    i = 0
    while i < len(order):
        j = i
        key = (int(levels[order[i]]), int(grids[order[i]]), int(tids[order[i]]))
        while j < len(order) and (
            int(levels[order[j]]),
            int(grids[order[j]]),
            int(tids[order[j]]),
        ) == key:
            j += 1
        sel = order[i:j]
        pc.tile(*key, create=True).extend(aos[sel], rdata[:, sel], idata[:, sel])
        touched.add(key)
        i = j
    for key in touched:
        pc.tiles[key].sort_by_id()


# ---------------------------------------------------------------------------
# locate
# ---------------------------------------------------------------------------


def _wrap_positions(geom, pos):
    w = np.array(pos, dtype=np.float64)
    plo = np.asarray(geom.prob_lo)
    phi = np.asarray(geom.prob_hi)
    ext = phi - plo
    for d in range(geom.dim):
        if not geom.periodic[d]:
            continue
        col = w[:, d]
        col -= ext[d] * np.floor((col - plo[d]) / ext[d])
        # rounding can park a wrapped coordinate exactly on the high edge
        col[col >= phi[d]] = plo[d]
    return w


def _cells_at(geom, w):
    plo = np.asarray(geom.prob_lo)
    dx = np.asarray(geom.cell_size)
    cells = np.floor((w - plo) / dx).astype(np.int64)
    for d in range(geom.dim):
        cells[:, d] += geom.domain.lo[d]
    return cells


def _locate_arrays(pc, pos, ids):
    """Level/grid/cell per row, finest level first; raises on failures."""
    w = _wrap_positions(pc.geoms[0], pos)
    n = w.shape[0]
    levels = np.full(n, -1, dtype=np.int64)
    grids = np.full(n, -1, dtype=np.int64)
    cells = np.zeros((n, pc.dim), dtype=np.int64)
    for lev in range(pc.nlevels - 1, -1, -1):
        pending = np.nonzero(levels < 0)[0]
        if pending.size == 0:
            break
        c = _cells_at(pc.geoms[lev], w[pending])
        ba = pc.bas[lev]
        for row, idx in enumerate(pending):
            g = ba.owner_at(IntVect(c[row]))
            if g is not None:
                levels[idx] = lev
                grids[idx] = g
                cells[idx] = c[row]
    if (levels < 0).any():
        bad = np.nonzero(levels < 0)[0]
        dom = pc.geoms[0].domain
        c0 = _cells_at(pc.geoms[0], w[bad])
        inside = np.ones(bad.size, dtype=bool)
        for d in range(pc.dim):
            inside &= (c0[:, d] >= dom.lo[d]) & (c0[:, d] <= dom.hi[d])
        if not inside.all():
            raise ParticleError(
                "position outside the non-periodic domain", ids[bad[~inside]]
            )
        raise ParticleError("no level covers particle position", ids[bad])
    return levels, grids, cells, w


def locate(pc, pos):
    """(level, grid, cell) for one position, scanning finest to coarsest."""
    levels, grids, cells, _ = _locate_arrays(
        pc, np.asarray(pos, float)[None, :], np.array([0], dtype=np.int64)
    )
    return int(levels[0]), int(grids[0]), IntVect(cells[0])


def check_locations(pc):
    """Violations of `stored bucket == locate result` over every particle."""
    bad = []
    for key in pc.sorted_keys():
        tile = pc.tiles[key]
        if tile.size == 0:
            continue
        levels, grids, cells, _ = _locate_arrays(pc, tile.aos["pos"], tile.aos["id"])
        tids = np.empty(tile.size, dtype=np.int64)
        for i in range(tile.size):
            tids[i] = _tile_ids_for_cells(
                pc.bas[levels[i]][grids[i]], pc.tile_size, cells[i : i + 1]
            )[0]
        for i in range(tile.size):
            expect = (int(levels[i]), int(grids[i]), int(tids[i]))
            if expect != key:
                bad.append((int(tile.aos["id"][i]), key, expect))
    return bad


# ---------------------------------------------------------------------------
# redistribute
# ---------------------------------------------------------------------------


def _default_local_k(pc):
    ext = 0
    for ba in pc.bas:
        for b in ba:
            ext = max(ext, max(b.extents()))
    return max(ext // 2, 1)


def redistribute(pc, transport=None, mode="global", k=None, subcycle=None):
    """Rebucket every particle at locate()'s (level, grid, tile) bucket.

    mode="local" asserts no particle left its tile region by more than k
    cells (the verifiable form of "moved at most k cells"); violations name
    ids and nothing is mutated.  subcycle={"levels": ..., "band": n} leaves
    particles on the excluded levels in place while they remain within n
    cells of their tile region.  Negative-id particles are dropped.  Tiles
    finish sorted by id, so the outcome is one canonical container no
    matter how many ranks took part.
    """
    if mode not in ("local", "global"):
        raise ValueError("mode must be 'local' or 'global'")
    if transport is None:
        transport = Transport(pc.nranks)
    if mode == "local":
        kk = _default_local_k(pc) if k is None else int(k)
        violations = []
        for key in pc.sorted_keys():
            lev, g, t = key
            tile = pc.tiles[key]
            valid = tile.aos["id"] > 0
            if not valid.any():
                continue
            cells = _cells_at(pc.geoms[lev], tile.aos["pos"][valid])
            tbox = tile_box_of(pc.bas[lev][g], pc.tile_size, t).grow(kk)
            ok = np.ones(cells.shape[0], dtype=bool)
            for d in range(pc.dim):
                ok &= (cells[:, d] >= tbox.lo[d]) & (cells[:, d] <= tbox.hi[d])
            if not ok.all():
                violations.extend(tile.aos["id"][valid][~ok].tolist())
        if violations:
            raise ParticleError("local-mode displacement bound exceeded", violations)

    sub_levels = set()
    band = 0
    if subcycle is not None:
        sub_levels = set(int(x) for x in subcycle["levels"])
        band = int(subcycle.get("band", 0))

    pc.epoch += 1
    outbox = {}
    arrivals = []
    moved = 0
    for key in pc.sorted_keys():
        lev, g, t = key
        tile = pc.tiles[key]
        valid = tile.aos["id"] > 0
        if not valid.all():
            tile.keep(valid)
        if tile.size == 0:
            del pc.tiles[key]
            continue
        process = np.ones(tile.size, dtype=bool)
        if lev in sub_levels:
            cells = _cells_at(pc.geoms[lev], tile.aos["pos"])
            tbox = tile_box_of(pc.bas[lev][g], pc.tile_size, t).grow(band)
            stay = np.ones(tile.size, dtype=bool)
            for d in range(pc.dim):
                stay &= (cells[:, d] >= tbox.lo[d]) & (cells[:, d] <= tbox.hi[d])
            process &= ~stay
        if not process.any():
            continue
        idx = np.nonzero(process)[0]
        levels, grids, cells, wrapped = _locate_arrays(
            pc, tile.aos["pos"][idx], tile.aos["id"][idx]
        )
        tile.aos["pos"][idx] = wrapped
        tids = np.empty(idx.size, dtype=np.int64)
        for lg in set(zip(levels.tolist(), grids.tolist())):
            sel = (levels == lg[0]) & (grids == lg[1])
            tids[sel] = _tile_ids_for_cells(
                pc.bas[lg[0]][lg[1]], pc.tile_size, cells[sel]
            )
        moving = ~((levels == lev) & (grids == g) & (tids == t))
        if not moving.any():
            continue
        move_rows = idx[moving]
        aos, rdata, idata = tile.take(move_rows)
        keep_mask = np.ones(tile.size, dtype=bool)
        keep_mask[move_rows] = False
        tile.keep(keep_mask)
        src_rank = pc.dms[lev][g]
        mlev, mgrid, mtid = levels[moving], grids[moving], tids[moving]
        moved += int(moving.sum())
        for row in range(len(aos)):
            dkey = (int(mlev[row]), int(mgrid[row]), int(mtid[row]))
            entry = (dkey, aos[row : row + 1], rdata[:, row : row + 1], idata[:, row : row + 1])
            dst_rank = pc.dms[dkey[0]][dkey[1]]
            if dst_rank == src_rank:
                arrivals.append(entry)
            else:
                outbox.setdefault((src_rank, dst_rank), _Packed()).append(entry)
        if tile.size == 0:
            del pc.tiles[key]

    for (sr, dr), payload in sorted(outbox.items()):
        transport.send(sr, dr, "redistribute", payload)
    for dr in range(pc.nranks):
        for _, _, payload in transport.drain(dr):
            arrivals.extend(payload)

    grouped = {}
    for dkey, aos, rdata, idata in arrivals:
        grouped.setdefault(dkey, []).append((aos, rdata, idata))
    for dkey in sorted(grouped):
        parts = grouped[dkey]
        tile = pc.tile(*dkey, create=True)
        tile.extend(
            np.concatenate([p[0] for p in parts]),
            np.concatenate([p[1] for p in parts], axis=1),
            np.concatenate([p[2] for p in parts], axis=1),
        )
        tile.sort_by_id()
    counters.incr("particles_redistributed", moved)


# ---------------------------------------------------------------------------
# neighbor halo
# ---------------------------------------------------------------------------


class _HaloTile:
    __slots__ = ("pos", "ids", "rdata", "src_grid", "src_tile", "src_slot", "shift")

    def __init__(self, dim, nreal):
        self.pos = np.zeros((0, dim))
        self.ids = np.zeros(0, dtype=np.int64)
        self.rdata = np.zeros((nreal, 0))
        self.src_grid = np.zeros(0, dtype=np.int64)
        self.src_tile = np.zeros(0, dtype=np.int64)
        self.src_slot = np.zeros(0, dtype=np.int64)
        self.shift = np.zeros((0, dim), dtype=np.int64)

    @property
    def size(self):
        return self.ids.shape[0]


class NeighborHalo:
    """Per-(level, grid, tile) copies of nearby foreign particles.

    Each copy carries provenance (owner grid, tile, slot, and the periodic
    cell shift applied), enough to refresh payloads or push sums back.  The
    epoch ties the membership to one redistribute generation.
    """

    __slots__ = ("nghost", "epoch", "tiles")

    def __init__(self, nghost, epoch):
        self.nghost = int(nghost)
        self.epoch = epoch
        self.tiles = {}

    @property
    def total(self):
        return sum(t.size for t in self.tiles.values())


def _require_fresh(pc, halo):
    if halo.epoch != pc.epoch:
        raise ParticleError("halo is stale; rebuild with fill_neighbors")


def fill_neighbors(pc, nghost, transport=None):
    """Build the halo: copies of every particle within nghost cells of a
    foreign tile's region, periodic images included."""
    if transport is None:
        transport = Transport(pc.nranks)
    nghost = int(nghost)
    halo = NeighborHalo(nghost, pc.epoch)
    outbox = {}
    arrivals = []
    for key in pc.sorted_keys():
        lev, g, t = key
        tile = pc.tiles[key]
        if tile.size == 0:
            continue
        geom = pc.geoms[lev]
        dx = np.asarray(geom.cell_size)
        layout_ba, layout_keys = pc.tile_layout(lev)
        cells = _cells_at(geom, tile.aos["pos"])
        shifts = _periodic_shifts(geom.domain, geom.periodic, geom.dim)
        src_rank = pc.dms[lev][g]
        zero = IntVect.zero(pc.dim)
        # one bounding-box hash query per (tile, shift), then a vectorized
        # membership test; a particle reaches tile T iff its shifted cell
        # lies in T's region grown by nghost
        for s in shifts:
            sc = np.asarray(s.coords, dtype=np.int64)
            shifted = cells + sc
            probe = Box(
                IntVect(int(shifted[:, d].min()) - nghost for d in range(pc.dim)),
                IntVect(int(shifted[:, d].max()) + nghost for d in range(pc.dim)),
            )
            for bidx, _ in layout_ba.intersections(probe):
                g2, t2 = layout_keys[bidx]
                if s == zero and (g2, t2) == (g, t):
                    continue
                tb = layout_ba[bidx].grow(nghost)
                inside = np.ones(tile.size, dtype=bool)
                for d in range(pc.dim):
                    inside &= (shifted[:, d] >= tb.lo[d]) & (shifted[:, d] <= tb.hi[d])
                if not inside.any():
                    continue
                pos_img = tile.aos["pos"] + sc * dx
                dkey = (lev, g2, t2)
                dst_rank = pc.dms[lev][g2]
                sink = (
                    arrivals
                    if dst_rank == src_rank
                    else outbox.setdefault((src_rank, dst_rank), _Packed())
                )
                for i in np.nonzero(inside)[0]:
                    sink.append(
                        (
                            dkey,
                            pos_img[i],
                            int(tile.aos["id"][i]),
                            tile.rdata[:, i].copy(),
                            g,
                            t,
                            int(i),
                            sc,
                        )
                    )
    for (sr, dr), payload in sorted(outbox.items()):
        transport.send(sr, dr, "fill_neighbors", payload)
    for dr in range(pc.nranks):
        for _, _, payload in transport.drain(dr):
            arrivals.extend(payload)

    grouped = {}
    for entry in arrivals:
        grouped.setdefault(entry[0], []).append(entry)
    for dkey in sorted(grouped):
        rows = grouped[dkey]
        ht = _HaloTile(pc.dim, pc.nreal)
        ht.pos = np.array([r[1] for r in rows])
        ht.ids = np.array([r[2] for r in rows], dtype=np.int64)
        ht.rdata = (
            np.stack([r[3] for r in rows], axis=1)
            if pc.nreal
            else np.zeros((0, len(rows)))
        )
        ht.src_grid = np.array([r[4] for r in rows], dtype=np.int64)
        ht.src_tile = np.array([r[5] for r in rows], dtype=np.int64)
        ht.src_slot = np.array([r[6] for r in rows], dtype=np.int64)
        ht.shift = np.stack([r[7] for r in rows])
        # canonical order: owner identity then image shift, so halo contents
        # never depend on which rank supplied which copy
        order = np.lexsort(
            tuple(ht.shift[:, d] for d in range(pc.dim - 1, -1, -1))
            + (ht.src_slot, ht.src_tile, ht.src_grid)
        )
        ht.pos = ht.pos[order]
        ht.ids = ht.ids[order]
        ht.rdata = ht.rdata[:, order]
        ht.src_grid = ht.src_grid[order]
        ht.src_tile = ht.src_tile[order]
        ht.src_slot = ht.src_slot[order]
        ht.shift = ht.shift[order]
        halo.tiles[dkey] = ht
    counters.incr("halo_copies", halo.total)
    return halo


def update_neighbors(pc, halo, transport=None):
    """Refresh halo payloads (pos and extras) from their owners; membership
    and provenance stay as built."""
    _require_fresh(pc, halo)
    if transport is None:
        transport = Transport(pc.nranks)
    outbox = {}
    for dkey in sorted(halo.tiles):
        lev = dkey[0]
        ht = halo.tiles[dkey]
        if ht.size == 0:
            continue
        dx = np.asarray(pc.geoms[lev].cell_size)
        holder = pc.dms[lev][dkey[1]]
        owner_ranks = np.array([pc.dms[lev][g] for g in ht.src_grid])
        fresh_pos = np.empty_like(ht.pos)
        fresh_r = np.empty_like(ht.rdata)
        for g2, t2 in sorted(set(zip(ht.src_grid.tolist(), ht.src_tile.tolist()))):
            sel = (ht.src_grid == g2) & (ht.src_tile == t2)
            src = pc.tiles[(lev, g2, t2)]
            slots = ht.src_slot[sel]
            fresh_pos[sel] = src.aos["pos"][slots] + ht.shift[sel] * dx
            fresh_r[:, sel] = src.rdata[:, slots]
        local = owner_ranks == holder
        ht.pos[local] = fresh_pos[local]
        ht.rdata[:, local] = fresh_r[:, local]
        for orank in sorted(set(owner_ranks.tolist())):
            if orank == holder:
                continue
            sel = np.nonzero(owner_ranks == orank)[0]
            outbox.setdefault((orank, holder), _Packed()).append(
                (dkey, sel, fresh_pos[sel], fresh_r[:, sel])
            )
    for (sr, dr), payload in sorted(outbox.items()):
        transport.send(sr, dr, "update_neighbors", payload)
    for dr in range(pc.nranks):
        for _, _, payload in transport.drain(dr):
            for dkey, sel, pos_new, r_new in payload:
                ht = halo.tiles[dkey]
                ht.pos[sel] = pos_new
                ht.rdata[:, sel] = r_new


def sum_neighbors(pc, halo, comp, transport=None):
    """Add each halo copy's component value onto its owner particle.

    Contributions apply in one canonical order (owner bucket and slot, then
    holder bucket), so the result is rank-count independent bit for bit.
    """
    _require_fresh(pc, halo)
    if transport is None:
        transport = Transport(pc.nranks)
    comp = int(comp)
    cols = []
    outbox = {}
    for hidx, dkey in enumerate(sorted(halo.tiles)):
        lev = dkey[0]
        ht = halo.tiles[dkey]
        if ht.size == 0:
            continue
        holder = pc.dms[lev][dkey[1]]
        owner_ranks = np.array([pc.dms[lev][g] for g in ht.src_grid])
        block = np.column_stack(
            [
                np.full(ht.size, lev, dtype=np.int64),
                ht.src_grid,
                ht.src_tile,
                ht.src_slot,
                np.full(ht.size, hidx, dtype=np.int64),
                np.arange(ht.size, dtype=np.int64),
            ]
        )
        vals = ht.rdata[comp]
        local = owner_ranks == holder
        if local.any():
            cols.append((block[local], vals[local]))
        for orank in sorted(set(owner_ranks.tolist())):
            if orank == holder:
                continue
            sel = owner_ranks == orank
            outbox.setdefault((holder, orank), _Packed()).append(
                (block[sel], vals[sel])
            )
    for (sr, dr), payload in sorted(outbox.items()):
        transport.send(sr, dr, "sum_neighbors", payload)
    for dr in range(pc.nranks):
        for _, _, payload in transport.drain(dr):
            cols.extend(payload)
    if not cols:
        return
    keys = np.concatenate([c[0] for c in cols])
    vals = np.concatenate([c[1] for c in cols])
    order = np.lexsort(
        (keys[:, 5], keys[:, 4], keys[:, 3], keys[:, 2], keys[:, 1], keys[:, 0])
    )
    keys = keys[order]
    vals = vals[order]
    i = 0
    while i < len(keys):
        lev, g2, t2 = int(keys[i, 0]), int(keys[i, 1]), int(keys[i, 2])
        j = i
        while (
            j < len(keys)
            and int(keys[j, 0]) == lev
            and int(keys[j, 1]) == g2
            and int(keys[j, 2]) == t2
        ):
            j += 1
        np.add.at(pc.tiles[(lev, g2, t2)].rdata[comp], keys[i:j, 3], vals[i:j])
        i = j


# ---------------------------------------------------------------------------
# neighbor lists
# ---------------------------------------------------------------------------


class _TileList:
    __slots__ = ("offsets", "indices", "ids", "n_owned")

    def __init__(self, offsets, indices, ids, n_owned):
        self.offsets = offsets
        self.indices = indices
        self.ids = ids
        self.n_owned = n_owned

    def neighbors_of(self, i):
        return self.indices[self.offsets[i] : self.offsets[i + 1]]


class NeighborList:
    """Per owned particle, indices into that tile's owned+halo storage."""

    __slots__ = ("cutoff", "tiles")

    def __init__(self, cutoff):
        self.cutoff = float(cutoff)
        self.tiles = {}

    def id_pairs(self):
        """Unordered id pairs over every listed neighbor relation."""
        out = set()
        for tl in self.tiles.values():
            for i in range(tl.n_owned):
                a = int(tl.ids[i])
                for j in tl.neighbors_of(i):
                    b = int(tl.ids[j])
                    out.add((min(a, b), max(a, b)))
        return out


def build_neighbor_list(pc, halo, cutoff, predicate=None):
    """Candidate pairs from cutoff-sized bins over owned+halo particles,
    kept where the predicate holds (default: distance <= cutoff)."""
    _require_fresh(pc, halo)
    cutoff = float(cutoff)
    nl = NeighborList(cutoff)
    for key in pc.sorted_keys():
        lev, g, t = key
        tile = pc.tiles[key]
        if tile.size == 0:
            continue
        geom = pc.geoms[lev]
        dx = np.asarray(geom.cell_size)
        if halo.nghost * float(dx.min()) < cutoff:
            raise ParticleError(
                f"halo nghost={halo.nghost} too small for cutoff {cutoff}"
            )
        ht = halo.tiles.get(key)
        own_pos = tile.aos["pos"]
        if ht is not None and ht.size:
            all_pos = np.concatenate([own_pos, ht.pos])
            all_ids = np.concatenate([tile.aos["id"], ht.ids])
        else:
            all_pos = own_pos
            all_ids = tile.aos["id"].copy()
        tbox = tile_box_of(pc.bas[lev][g], pc.tile_size, t)
        plo = np.asarray(geom.prob_lo)
        dlo = np.asarray(geom.domain.lo.coords)
        lo = plo + (np.asarray(tbox.lo.coords) - dlo - halo.nghost) * dx
        hi = plo + (np.asarray(tbox.hi.coords) - dlo + 1 + halo.nghost) * dx
        if predicate is None:
            pairs = kernels.neighbor_pairs(all_pos, lo, hi, cutoff)
        else:
            pairs = kernels.neighbor_pairs(all_pos, lo, hi, cutoff, max_dist=np.inf)
            if pairs.shape[0]:
                keep = predicate(all_pos[pairs[:, 0]], all_pos[pairs[:, 1]])
                pairs = pairs[np.asarray(keep, dtype=bool)]
        n_own = own_pos.shape[0]
        if pairs.shape[0]:
            a, b = pairs[:, 0], pairs[:, 1]
            src = np.concatenate([a[a < n_own], b[b < n_own]])
            dst = np.concatenate([b[a < n_own], a[b < n_own]])
            order = np.lexsort((dst, src))
            src, dst = src[order], dst[order]
        else:
            src = np.empty(0, dtype=np.int64)
            dst = np.empty(0, dtype=np.int64)
        counts = np.bincount(src, minlength=n_own)
        offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        nl.tiles[key] = _TileList(offsets, dst, all_ids, n_own)
    return nl


# ---------------------------------------------------------------------------
# scan utilities
# ---------------------------------------------------------------------------


def prefix_scan(n, reader, writer=None, kind="exclusive", chunk=65536):
    """Running tally over reader(0..n-1) through writer(i, partial).

    Chunks are scanned left to right with an exact carry, so any chunk size
    reproduces the sequential result, additions in the same order.
    """
    if kind not in ("exclusive", "inclusive"):
        raise ValueError("kind must be 'exclusive' or 'inclusive'")
    if n < 0:
        raise ValueError("n must be >= 0")
    chunk = max(int(chunk), 1)
    carry = None
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        values = np.asarray([reader(i) for i in range(start, stop)])
        if carry is None:
            carry = values.dtype.type(0)
        out, carry = kernels.scan_chunk(values, carry, kind == "exclusive")
        if writer is not None:
            for off in range(stop - start):
                writer(start + off, out[off])
    if carry is None:
        return 0
    return carry.item() if hasattr(carry, "item") else carry


def bin_permutation(cells, nbins):
    """Counting-sort pieces: per-bin counts, exclusive-scan offsets, and a
    bin-stable permutation into sorted order."""
    cells = np.asarray(cells, dtype=np.int64)
    nbins = int(nbins)
    if cells.size and (cells.min() < 0 or cells.max() >= nbins):
        raise ValueError("bin id out of range")
    counts = np.bincount(cells, minlength=nbins).astype(np.int64)
    offsets = np.zeros(nbins, dtype=np.int64)
    prefix_scan(
        nbins,
        lambda i: counts[i],
        lambda i, v: offsets.__setitem__(i, v),
        kind="exclusive",
    )
    perm = np.argsort(cells, kind="stable").astype(np.int64)
    return counts, offsets, perm


def stream_compact(n, predicate):
    """(kept count, indices of kept elements in original order)."""
    flags = np.fromiter((1 if predicate(i) else 0 for i in range(n)), np.int64, n)
    slots = np.zeros(n, dtype=np.int64)
    total = prefix_scan(
        n,
        lambda i: flags[i],
        lambda i, v: slots.__setitem__(i, v),
        kind="exclusive",
    )
    kept = int(total)
    out = np.empty(kept, dtype=np.int64)
    sel = flags == 1
    out[slots[sel]] = np.nonzero(sel)[0]
    return kept, out


def partition(n, predicate):
    """(kept count, permutation with kept elements stable-first)."""
    kept, front = stream_compact(n, predicate)
    _, back = stream_compact(n, lambda i, f=predicate: not f(i))
    return kept, np.concatenate([front, back])


# ---------------------------------------------------------------------------
# particle-mesh transfer
# ---------------------------------------------------------------------------


class _FabAlias(Fab):
    """One component of an existing Fab, sharing its storage."""

    def __init__(self, base, comp):
        self.box = base.box
        self.gbox = base.gbox
        self.ncomp = 1
        self.ngrow = base.ngrow
        self.data = base.data[comp : comp + 1]


def _comp_alias(fa, comp):
    out = FabArray.__new__(FabArray)
    out.ba = fa.ba
    out.dm = fa.dm
    out.ncomp = 1
    out.ngrow = fa.ngrow
    out.dtype = fa.dtype
    out.fabs = {i: _FabAlias(f, comp) for i, f in fa.fabs.items()}
    return out


_KERNEL_RADIUS = {"ngp": 0, "cic": 1}


def _frame_lo(geom, box_lo):
    return np.asarray(box_lo.coords, dtype=np.int64) - np.asarray(
        geom.domain.lo.coords, dtype=np.int64
    )


def _deposit_tile(geom, kernel, pos, weights, buf, bufbox):
    plo = np.asarray(geom.prob_lo)
    dxinv = 1.0 / np.asarray(geom.cell_size)
    arr_lo = _frame_lo(geom, bufbox.lo)
    if kernel == "cic":
        kernels.deposit_cic(pos, weights, plo, dxinv, arr_lo, buf)
        return
    cells = np.floor((pos - plo) * dxinv).astype(np.int64) - arr_lo
    flat = buf.reshape(-1)
    lin = np.zeros(pos.shape[0], dtype=np.int64)
    for d in range(pos.shape[1]):
        lin = lin * buf.shape[d] + cells[:, d]
    np.add.at(flat, lin, weights)


def _gather_tile(geom, kernel, pos, grid, gbox):
    plo = np.asarray(geom.prob_lo)
    dxinv = 1.0 / np.asarray(geom.cell_size)
    arr_lo = _frame_lo(geom, gbox.lo)
    if kernel == "cic":
        return kernels.gather_cic(pos, plo, dxinv, arr_lo, grid)
    cells = np.floor((pos - plo) * dxinv).astype(np.int64) - arr_lo
    return grid[tuple(cells[:, d] for d in range(pos.shape[1]))]


def particle_to_mesh(
    pc, mesh, transport=None, kernel="cic", dual_grid=False, level=0, comp=0, weight=None
):
    """Deposit particle weights onto the mesh component (overwriting it).

    Each tile deposits into a private buffer covering its region plus the
    kernel radius; buffers fold into the fabs in tile order and ghost cells
    fold across grids with a boundary sum.  With dual_grid the deposit
    lands on a scratch FabArray over the particle layout first and is then
    copied onto the mesh.
    """
    kernel = kernel.lower()
    radius = _KERNEL_RADIUS[kernel]
    if transport is None:
        transport = Transport(pc.nranks)
    geom = pc.geoms[level]
    if mesh.ngrow < radius:
        raise ParticleError(f"mesh ngrow {mesh.ngrow} < kernel radius {radius}")
    if dual_grid:
        target = FabArray(pc.bas[level], pc.dms[level], 1, ngrow=radius, dtype=mesh.dtype)
        tcomp = 0
    else:
        if mesh.ba != pc.bas[level]:
            raise ParticleError("mesh layout differs; deposit needs dual_grid=True")
        target = mesh
        tcomp = comp
    target.setval(0.0, comp=tcomp, ghosts=True)
    for key in pc.sorted_keys():
        lev, g, t = key
        if lev != level:
            continue
        tile = pc.tiles[key]
        if tile.size == 0:
            continue
        if weight is None:
            w = np.ones(tile.size)
        else:
            w = tile.rdata[int(weight)].astype(np.float64, copy=True)
        bufbox = tile_box_of(pc.bas[level][g], pc.tile_size, t).grow(radius)
        buf = np.zeros(tuple(bufbox.extents()), dtype=target.dtype)
        _deposit_tile(geom, kernel, tile.aos["pos"], w, buf, bufbox)
        target.fab(g).slice(bufbox, tcomp)[...] += buf
    alias = _comp_alias(target, tcomp) if target.ncomp > 1 else target
    sum_boundary(alias, transport, geom.domain, geom.periodic)
    if dual_grid:
        mesh_alias = _comp_alias(mesh, comp)
        mesh_alias.setval(0.0)
        parallel_copy(mesh_alias, target, transport, geom.domain, geom.periodic)


def mesh_to_particle(
    pc, mesh, transport=None, kernel="cic", dual_grid=False, level=0, comp=0, out_comp=None
):
    """Interpolate the mesh component to every particle on the level.

    Ghost cells are refreshed first so tile-local windows see their
    neighbors.  Returns {(level, grid, tile): values}; out_comp also stores
    the values into that extra-real component.
    """
    kernel = kernel.lower()
    radius = _KERNEL_RADIUS[kernel]
    if transport is None:
        transport = Transport(pc.nranks)
    geom = pc.geoms[level]
    if dual_grid:
        src = FabArray(pc.bas[level], pc.dms[level], 1, ngrow=max(radius, 1), dtype=mesh.dtype)
        parallel_copy(src, _comp_alias(mesh, comp), transport, geom.domain, geom.periodic)
        scomp = 0
    else:
        if mesh.ngrow < radius:
            raise ParticleError(f"mesh ngrow {mesh.ngrow} < kernel radius {radius}")
        if mesh.ba != pc.bas[level]:
            raise ParticleError("mesh layout differs; gather needs dual_grid=True")
        src = mesh
        scomp = comp
    fill_boundary(
        _comp_alias(src, scomp) if src.ncomp > 1 else src,
        transport,
        geom.domain,
        geom.periodic,
    )
    out = {}
    for key in pc.sorted_keys():
        lev, g, t = key
        if lev != level:
            continue
        tile = pc.tiles[key]
        if tile.size == 0:
            continue
        fab = src.fab(g)
        grid = fab.data[scomp]
        vals = _gather_tile(geom, kernel, tile.aos["pos"], grid, fab.gbox)
        out[key] = vals
        if out_comp is not None:
            tile.rdata[int(out_comp)] = vals
    return out


# ---------------------------------------------------------------------------
# keyed pseudo-random draws
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


def _mix_int(x):
    x &= _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _mix_array(x):
    x = x ^ (x >> np.uint64(30))
    x = x * np.uint64(0xBF58476D1CE4E5B9)
    x = x ^ (x >> np.uint64(27))
    x = x * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def keyed_uniforms(seed, step, ids, ncomp=1):
    """Uniform [0,1) draws keyed by (seed, step, id, component).

    The draw for a given particle depends only on those keys, never on
    storage order or rank count, so randomized motion stays reproducible
    under any decomposition.
    """
    ids64 = np.asarray(ids, dtype=np.uint64)
    base = _mix_int((int(seed) * 0x9E3779B97F4A7C15) ^ _mix_int(int(step) + 0x632BE59BD9B4E019))
    out = np.empty((ids64.shape[0], int(ncomp)))
    for c in range(int(ncomp)):
        salt = np.uint64((base + c * 0x8CB92BA72F3D8DD7) & _MASK64)
        h = _mix_array(ids64 * np.uint64(0x9E3779B97F4A7C15) + salt)
        out[:, c] = (h >> np.uint64(11)).astype(np.float64) * 2.0**-53
    return out
