"""Inter-level data motion: interpolation, restriction, patch fill, refluxing.

Flux/sign conventions used throughout (pinned by the conservation tests):
face i of dimension d sits between cells i-1 and i; a cell update is
phi[i] -= dt/dx * (F[i+1] - F[i]).  The flux register accumulates
(time-averaged fine flux) - (coarse flux) per coarse face on the
coarse/fine boundary; refluxing adds register * dt/dx to the adjacent
uncovered coarse cell, with sign +1 when the cell sits on the high side of
the fine region and -1 on the low side.
"""

from __future__ import annotations

import numpy as np

from .boxarray import BoxArray
from .fabarray import FabArray, build_plan_copy, parallel_copy, _execute_plan
from .index_space import Box, IndexType, IntVect, box_diff


def _as_ratio(ratio, dim):
    if isinstance(ratio, int):
        return IntVect((ratio,) * dim)
    if not isinstance(ratio, IntVect):
        return IntVect(ratio)
    return ratio


_coarsen_memo = {}
_coarsen_lock = __import__("threading").Lock()


def coarsened_layout(ba, ratio):
    """Memoized ba.coarsen(ratio): one stable layout (and uid) per input, so
    communication plans built against it stay cached across calls."""
    key = (ba.uid, ratio.coords)
    with _coarsen_lock:
        hit = _coarsen_memo.get(key)
    if hit is not None:
        return hit
    cba = ba.coarsen(ratio)
    with _coarsen_lock:
        return _coarsen_memo.setdefault(key, cba)


def _child_offsets(r):
    """Fractional displacement of each child cell center from its parent's."""
    return (np.arange(r) + 0.5) / r - 0.5


def _limited_slope(core, lo, hi):
    """Minmod-limited central difference, zero at extrema."""
    dl = core - lo
    dr = hi - core
    pos = (dl > 0) & (dr > 0)
    neg = (dl < 0) & (dr < 0)
    return np.where(pos, np.minimum(dl, dr), np.where(neg, np.maximum(dl, dr), 0.0))


def interp_block(block, ratio, kind, margin=1):
    """Interpolate one coarse block (ncomp leading axis, margin cells of
    padding per side) to the refined image of its core region."""
    dim = block.ndim - 1
    core_idx = (slice(None),) + tuple(
        slice(margin, block.shape[1 + d] - margin) for d in range(dim)
    )
    core = block[core_idx]
    fine = core
    for d in range(dim):
        fine = np.repeat(fine, ratio[d], axis=1 + d)
    if kind == "pc":
        return fine.copy() if fine is core else fine
    if kind != "linear":
        raise ValueError(f"unknown interpolation kind {kind!r}")
    if margin < 1:
        raise ValueError("linear interpolation needs a margin of 1 coarse cell")
    for d in range(dim):
        lo_idx = (slice(None),) + tuple(
            slice(margin - 1, block.shape[1 + k] - margin - 1)
            if k == d
            else slice(margin, block.shape[1 + k] - margin)
            for k in range(dim)
        )
        hi_idx = (slice(None),) + tuple(
            slice(margin + 1, block.shape[1 + k] - margin + 1)
            if k == d
            else slice(margin, block.shape[1 + k] - margin)
            for k in range(dim)
        )
        slope = _limited_slope(core, block[lo_idx], block[hi_idx])
        for k in range(dim):
            slope = np.repeat(slope, ratio[k], axis=1 + k)
        offs = np.tile(_child_offsets(ratio[d]), core.shape[1 + d])
        shape = [1] * (dim + 1)
        shape[1 + d] = len(offs)
        fine = fine + slope * offs.reshape(shape)
    return fine


def interp_c2f(crse, fine_region, ratio, kind="linear"):
    """Fine values over fine_region interpolated from a coarse FabArray.

    piecewise constant ('pc'): child = parent.  linear: child = parent +
    limited per-dimension slope times the child's fractional offset.
    Raises if any needed parent cell is not covered by the coarse layout.
    """
    ratio = _as_ratio(ratio, fine_region.dim)
    margin = 1 if kind == "linear" else 0
    parents = fine_region.coarsen(ratio)
    block_box = parents.grow(margin)
    block = np.full((crse.ncomp,) + tuple(block_box.extents()), np.nan)
    for i in range(len(crse.ba)):
        ov = crse.fab(i).gbox.intersect(block_box)
        if ov.is_empty():
            continue
        idx = tuple(
            slice(ov.lo[d] - block_box.lo[d], ov.hi[d] - block_box.lo[d] + 1)
            for d in range(fine_region.dim)
        )
        block[(slice(None),) + idx] = crse.fab(i).slice(ov)
    pcheck = tuple(
        slice(parents.lo[d] - block_box.lo[d], parents.hi[d] - block_box.lo[d] + 1)
        for d in range(fine_region.dim)
    )
    if np.isnan(block[(slice(None),) + pcheck]).any():
        raise ValueError("fine region has parent cells not covered by the coarse data")
    fine = interp_block(block, ratio, kind, margin)
    flo = parents.refine(ratio).lo
    out_idx = tuple(
        slice(fine_region.lo[d] - flo[d], fine_region.hi[d] - flo[d] + 1)
        for d in range(fine_region.dim)
    )
    return fine[(slice(None),) + out_idx]


def average_down(fine, crse, ratio, transport, mode="average"):
    """Replace covered coarse cells with the mean (or lowest-corner
    injection) of their fine children.

    The fine layout must be coarsenable by the ratio so per-box restriction
    lands on whole coarse cells.
    """
    ratio = _as_ratio(ratio, fine.dim)
    if not fine.ba.coarsenable(ratio):
        raise ValueError("fine BoxArray is not coarsenable by the given ratio")
    if mode not in ("average", "injection"):
        raise ValueError(f"unknown restriction mode {mode!r}")
    cba = coarsened_layout(fine.ba, ratio)
    tmp = FabArray(cba, fine.dm, fine.ncomp, 0, fine.dtype)
    for i in range(len(fine.ba)):
        src = fine.fab(i).valid()
        if mode == "injection":
            idx = (slice(None),) + tuple(
                slice(0, None, ratio[d]) for d in range(fine.dim)
            )
            tmp.fab(i).valid()[...] = src[idx]
        else:
            shape = [fine.ncomp]
            for d in range(fine.dim):
                shape.extend([cba[i].extents()[d], ratio[d]])
            axes = tuple(2 + 2 * d for d in range(fine.dim))
            tmp.fab(i).valid()[...] = src.reshape(shape).mean(axis=axes)
    parallel_copy(crse, tmp, transport)


def interp_to_fine(fine, crse, ratio, transport, method="pc"):
    """Fill the whole valid region of a fine FabArray by interpolation.

    Parents are staged onto the coarsened fine layout through the
    transport, then interpolated box-locally (piecewise constant needs no
    margin, so nesting alone guarantees coverage).
    """
    ratio = _as_ratio(ratio, fine.dim)
    if not fine.ba.coarsenable(ratio):
        raise ValueError("fine BoxArray is not coarsenable by the given ratio")
    margin = 1 if method == "linear" else 0
    stage = FabArray(coarsened_layout(fine.ba, ratio), fine.dm, fine.ncomp, margin, fine.dtype)
    stage.setval(np.nan)
    _copy_into(stage, crse, transport, include_dst_ghosts=margin > 0)
    for i in range(len(fine.ba)):
        block = stage.fab(i).data
        core = block[(slice(None),) + (slice(margin, -margin or None),) * fine.dim]
        if np.isnan(core).any():
            raise ValueError("fine region has parent cells not covered by the coarse data")
        fine.fab(i).valid()[...] = interp_block(block, ratio, method, margin)


def _copy_into(dst, src, transport, include_dst_ghosts=False, domain=None, periodic=None):
    """parallel_copy variant that may also target dst ghost cells."""
    if dst.ncomp != src.ncomp:
        raise ValueError("component count mismatch")
    ngrow = dst.ngrow if include_dst_ghosts else 0
    plan = build_plan_copy_grown(dst.ba, src.ba, ngrow, domain, periodic)

    def combine(d, s):
        d[...] = s

    _execute_plan(plan, src, dst, transport, combine)


def build_plan_copy_grown(dst_ba, src_ba, ngrow, domain=None, periodic=None):
    from .fabarray import CommPlan, CopyRecord, _cached_plan, _normalize_periodic, _periodic_shifts

    periodic = _normalize_periodic(periodic, dst_ba.dim)
    key = ("copyg", dst_ba.uid, src_ba.uid, ngrow, periodic, domain)

    def build():
        if domain is None:
            shifts = [IntVect.zero(dst_ba.dim)]
        else:
            shifts = _periodic_shifts(domain, periodic, dst_ba.dim)
        records = []
        for j in range(len(dst_ba)):
            target = dst_ba[j].grow(ngrow)
            for s in shifts:
                for i, ov in src_ba.intersections(target.shift(-s)):
                    records.append(CopyRecord(i, j, ov, ov.shift(s), s))
        return CommPlan(records)

    return _cached_plan(key, build)


def snapshot_valid(fa):
    """Ghost-free copy of a FabArray's valid data on the same layout."""
    out = FabArray(fa.ba, fa.dm, fa.ncomp, 0, fa.dtype)
    for i in range(len(fa.ba)):
        out.fab(i).valid()[...] = fa.fab(i).valid()
    return out


def fill_patch(
    dst,
    fine_src,
    crse_old,
    crse_new,
    time_weight,
    ratio,
    transport,
    domain=None,
    periodic=None,
    kind="linear",
    boundary=None,
    geom=None,
):
    """Fill dst (valid + ghost cells) from fine data where available, else
    from time-blended coarse data interpolated to the fine level.

    The blend (1-w) * crse_old + w * crse_new happens before interpolation.
    Fine copies win over interpolation wherever fine_src covers a cell.
    domain/periodic describe the FINE level index space; physical-boundary
    ghosts follow the BoundaryRecord when one is given (geom required).
    """
    if not 0.0 <= time_weight <= 1.0:
        raise ValueError("time_weight must lie in [0, 1]")
    dim = dst.dim
    ratio = _as_ratio(ratio, dim)
    if fine_src is dst:
        # the interpolation pass below overwrites dst wholesale, so the
        # fine data must be staged out of it first
        fine_src = snapshot_valid(dst)
    if time_weight == 0.0:
        blended = crse_old
    elif time_weight == 1.0 or crse_old is None:
        blended = crse_new
    else:
        blended = FabArray(crse_new.ba, crse_new.dm, crse_new.ncomp, 0, crse_new.dtype)
        for i in range(len(blended.ba)):
            blended.fab(i).valid()[...] = (1.0 - time_weight) * crse_old.fab(i).valid() + (
                time_weight
            ) * crse_new.fab(i).valid()
    margin = 1 if kind == "linear" else 0
    gc = -(-dst.ngrow // max(min(ratio.coords), 1)) + max(margin, 1)
    cdomain = domain.coarsen(ratio) if domain is not None else None
    stage = FabArray(coarsened_layout(dst.ba, ratio), dst.dm, dst.ncomp, gc, dst.dtype)
    stage.setval(np.nan)
    _copy_into(stage, blended, transport, include_dst_ghosts=True,
               domain=cdomain, periodic=periodic)
    for j in range(len(dst.ba)):
        f = dst.fab(j)
        parents = f.gbox.coarsen(ratio)
        block_box = parents.grow(margin)
        block = stage.fab(j).slice(block_box)
        fine = interp_block(block, ratio, kind, margin)
        flo = parents.refine(ratio).lo
        idx = tuple(
            slice(f.gbox.lo[d] - flo[d], f.gbox.hi[d] - flo[d] + 1) for d in range(dim)
        )
        f.data[...] = fine[(slice(None),) + idx]
    if fine_src is not None:
        _copy_into(dst, fine_src, transport, include_dst_ghosts=True,
                   domain=domain, periodic=periodic)
    if boundary is not None:
        from .amr_core import apply_domain_boundary

        apply_domain_boundary(dst, geom, boundary)
    if domain is not None:
        from .fabarray import _normalize_periodic

        per = _normalize_periodic(periodic, dim)
        check = domain.grow(
            IntVect(dst.ngrow if per[d] else 0 for d in range(dim))
        )
        for j in range(len(dst.ba)):
            f = dst.fab(j)
            ov = f.gbox.intersect(check)
            if not ov.is_empty() and np.isnan(f.slice(ov)).any():
                raise ValueError(
                    f"box {j}: in-domain cells coverable by neither level"
                )


# ---------------------------------------------------------------------------
# flux register
# ---------------------------------------------------------------------------


class FluxRegister:
    """Per coarse face on the fine-level boundary: (avg fine flux - coarse flux).

    Patches are indexed (fine_box, dim, side); each holds a face-typed box
    at coarse resolution and an (ncomp, *face extents) array.  Faces whose
    outside cell is covered by the fine level accumulate harmlessly and are
    skipped at reflux time.
    """

    def __init__(self, fine_ba, ratio, ncomp=1):
        self.ratio = _as_ratio(ratio, fine_ba.dim)
        self.ncomp = int(ncomp)
        if not fine_ba.coarsenable(self.ratio):
            raise ValueError("fine BoxArray is not coarsenable by the given ratio")
        self.fine_ba = fine_ba
        self.cba = coarsened_layout(fine_ba, self.ratio)
        self.dim = fine_ba.dim
        self.patches = {}
        for k, fc in enumerate(self.cba):
            for d in range(self.dim):
                for side in ("lo", "hi"):
                    plane = fc.lo[d] if side == "lo" else fc.hi[d] + 1
                    lo = list(fc.lo)
                    hi = list(fc.hi)
                    lo[d] = hi[d] = plane
                    fbox = Box(IntVect(lo), IntVect(hi), IndexType.face(self.dim, d))
                    self.patches[(k, d, side)] = {
                        "face_box": fbox,
                        "data": np.zeros((self.ncomp,) + tuple(fbox.extents())),
                    }

    def zero(self):
        for p in self.patches.values():
            p["data"][...] = 0.0
        return self

    @staticmethod
    def _face_slice(region, face_box, lead=True):
        idx = tuple(
            slice(region.lo[d] - face_box.lo[d], region.hi[d] - face_box.lo[d] + 1)
            for d in range(region.dim)
        )
        return ((slice(None),) + idx) if lead else idx

    def crse_add(self, crse_fluxes, crse_ba, domain, scale=1.0):
        """Subtract coarse face fluxes (times scale) on every register face.

        crse_fluxes maps coarse box index -> per-dimension face arrays of
        shape (ncomp, extents + 1 in that dimension).  A face plane shared
        by two coarse boxes is read once, from the box owning the cell on
        the face's high side (domain-top planes read from the box below).
        """
        for (k, d, side), p in self.patches.items():
            pf = p["face_box"]
            for ci, flux_list in sorted(crse_fluxes.items()):
                cbox = crse_ba[ci]
                fb_ci = cbox.convert(IndexType.face(self.dim, d))
                owned_hi = list(fb_ci.hi)
                if cbox.hi[d] != domain.hi[d]:
                    owned_hi[d] -= 1
                owned = Box(fb_ci.lo, IntVect(owned_hi), fb_ci.ixtype)
                region = pf.intersect(owned)
                if region.is_empty():
                    continue
                flux = flux_list[d]
                p["data"][self._face_slice(region, pf)] -= scale * flux[
                    self._face_slice(region, fb_ci)
                ]

    def fine_add(self, k, fine_fluxes, scale=1.0):
        """Add the spatially averaged fine fluxes of fine box k, times scale.

        Call once per fine substep with scale = 1/nsubsteps to build the
        time average across a coarse step.
        """
        fb = self.fine_ba[k]
        for d in range(self.dim):
            flux = fine_fluxes[d]
            want = [self.ncomp] + [
                fb.extents()[kk] + (1 if kk == d else 0) for kk in range(self.dim)
            ]
            if list(flux.shape) != want:
                raise ValueError(
                    f"fine flux for dim {d} has shape {flux.shape}, expected {want}"
                )
            for side in ("lo", "hi"):
                p = self.patches[(k, d, side)]
                local = 0 if side == "lo" else fb.extents()[d]
                plane_idx = (slice(None),) + tuple(
                    local if kk == d else slice(None) for kk in range(self.dim)
                )
                plane = flux[plane_idx]
                # spatial average over ratio^(D-1) fine faces per coarse face
                shape = [self.ncomp]
                axes = []
                for kk in range(self.dim):
                    if kk == d:
                        continue
                    shape.extend([fb.extents()[kk] // self.ratio[kk], self.ratio[kk]])
                    axes.append(len(shape) - 1)
                avg = plane.reshape(shape).mean(axis=tuple(axes)) if axes else plane
                p["data"][...] += scale * avg.reshape(p["data"].shape)

    def reflux(self, crse, dt_over_dx, domain, periodic=None):
        """Apply register corrections to adjacent uncovered coarse cells.

        dt_over_dx: scalar or per-dimension sequence (coarse dt over coarse
        cell size).  Cells covered by the fine level are untouched; the
        adjacent cell may wrap around periodic dimensions.
        """
        from .fabarray import _normalize_periodic

        periodic = _normalize_periodic(periodic, self.dim)
        if np.isscalar(dt_over_dx):
            dt_over_dx = [float(dt_over_dx)] * self.dim
        ext = domain.extents()
        for (k, d, side), p in self.patches.items():
            pf = p["face_box"]
            fc = self.cba[k]
            sign = -1.0 if side == "lo" else 1.0
            cell_lo = list(pf.lo)
            cell_hi = list(pf.hi)
            if side == "lo":
                cell_lo[d] = cell_hi[d] = fc.lo[d] - 1
            else:
                cell_lo[d] = cell_hi[d] = fc.hi[d] + 1
            adj = Box(IntVect(cell_lo), IntVect(cell_hi))
            shift = IntVect.zero(self.dim)
            if adj.lo[d] < domain.lo[d]:
                if not periodic[d]:
                    continue
                shift = IntVect(ext[kk] if kk == d else 0 for kk in range(self.dim))
            elif adj.hi[d] > domain.hi[d]:
                if not periodic[d]:
                    continue
                shift = IntVect(-ext[kk] if kk == d else 0 for kk in range(self.dim))
            wrapped = adj.shift(shift)
            for ci, ov in crse.ba.intersections(wrapped):
                pieces = [ov]
                for _, cov in self.cba.intersections(ov):
                    nxt = []
                    for piece in pieces:
                        nxt.extend(box_diff(piece, cov))
                    pieces = nxt
                for piece in pieces:
                    face_region = piece.shift(-shift)
                    fr_lo = list(face_region.lo)
                    fr_hi = list(face_region.hi)
                    if side == "lo":
                        fr_lo[d] += 1
                        fr_hi[d] += 1
                    face_region = Box(IntVect(fr_lo), IntVect(fr_hi), pf.ixtype)
                    vals = p["data"][self._face_slice(face_region, pf)]
                    crse.fab(ci).slice(piece)[...] += (
                        sign * dt_over_dx[d]
                    ) * vals
