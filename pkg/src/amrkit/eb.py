"""Embedded geometry from implicit functions: CSG construction, cell
classification, subsampled cut-cell moments, small-cell redistribution,
node level sets, and covered-box pruning.

Sign convention everywhere: f > 0 inside the solid body, f < 0 in fluid,
f = 0 on the boundary.  The boundary normal points from fluid into body.

Moments come from s^D subsampling per cell (s^(D-1) per face) rather than
exact clipping; every consumer gets the sampling resolution alongside the
data so tolerances can follow 1/s.  Cell sizes are taken isotropic when
converting face sums to a boundary area (area is in units of dx^(D-1)).
"""

from __future__ import annotations

import ast
import itertools

import numpy as np

from .boxarray import BoxArray
from .distribution import DistributionMapping
from .fabarray import FabArray, gather_global
from .index_space import Box, IndexType, IntVect

REGULAR = 0
CUT = 1
COVERED = 2


# ---------------------------------------------------------------------------
# implicit functions
# ---------------------------------------------------------------------------


class ImplicitFunction:
    """Vectorized signed field over physical points, positive inside body."""

    __slots__ = ("_fn", "label")

    def __init__(self, fn, label="custom"):
        self._fn = fn
        self.label = label

    def __call__(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        squeeze = pts.ndim == 1
        if squeeze:
            pts = pts[None, :]
        out = np.asarray(self._fn(pts), dtype=np.float64)
        return float(out[0]) if squeeze else out

    def __repr__(self):
        return f"ImplicitFunction({self.label})"


def sphere(radius, center):
    c = np.asarray(center, dtype=np.float64)
    r = float(radius)

    def fn(p):
        return r - np.sqrt(((p - c) ** 2).sum(axis=1))

    return ImplicitFunction(fn, f"sphere(r={r})")


def box(lo, hi):
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if not (hi > lo).all():
        raise ValueError("box needs hi > lo in every dimension")

    def fn(p):
        return np.minimum(p - lo, hi - p).min(axis=1)

    return ImplicitFunction(fn, "box")


def cylinder(radius, axis, center):
    r = float(radius)
    axis = int(axis)
    c = np.asarray(center, dtype=np.float64)

    def fn(p):
        d2 = np.zeros(p.shape[0])
        for d in range(p.shape[1]):
            if d != axis:
                d2 += (p[:, d] - c[d]) ** 2
        return r - np.sqrt(d2)

    return ImplicitFunction(fn, f"cylinder(r={r}, axis={axis})")


def union(*fs):
    if not fs:
        raise ValueError("union needs at least one operand")

    def fn(p):
        out = fs[0](p)
        for g in fs[1:]:
            out = np.maximum(out, g(p))
        return out

    return ImplicitFunction(fn, "union")


def intersection(*fs):
    if not fs:
        raise ValueError("intersection needs at least one operand")

    def fn(p):
        out = fs[0](p)
        for g in fs[1:]:
            out = np.minimum(out, g(p))
        return out

    return ImplicitFunction(fn, "intersection")


def complement(f):
    return ImplicitFunction(lambda p: -f(p), "complement")


def difference(f, g):
    return intersection(f, complement(g))


def translate(f, offset):
    off = np.asarray(offset, dtype=np.float64)
    return ImplicitFunction(lambda p: f(p - off), "translate")


def rotate(f, axis, angle, center=None):
    """Rigid rotation of the body by angle (radians) about the axis through
    center; points are inverse-rotated before evaluation."""
    axis = int(axis)
    ca, sa = np.cos(float(angle)), np.sin(float(angle))

    def fn(p):
        dim = p.shape[1]
        c = np.zeros(dim) if center is None else np.asarray(center, np.float64)
        if dim == 2:
            u, v = 0, 1
        else:
            u, v = [d for d in range(3) if d != axis]
        q = p - c
        out = q.copy()
        # inverse rotation: R(-angle) applied in the (u, v) plane
        out[:, u] = ca * q[:, u] + sa * q[:, v]
        out[:, v] = -sa * q[:, u] + ca * q[:, v]
        return f(out + c)

    return ImplicitFunction(fn, "rotate")


# ---------------------------------------------------------------------------
# CSG expression grammar (config files and the CLI)
# ---------------------------------------------------------------------------

_CSG_FUNCS = {
    "sphere": sphere,
    "box": box,
    "cube": box,
    "cylinder": cylinder,
    "union": union,
    "intersection": intersection,
    "difference": difference,
    "complement": complement,
    "translate": translate,
    "rotate": rotate,
}


def parse_csg(text):
    """Build an ImplicitFunction from a small expression grammar.

    Allowed: calls to the primitive/combinator names, numeric literals,
    unary minus, and (...) tuples, e.g.
    ``difference(intersection(sphere(0.5,(0,0,0)), box((-0.4,)*3, (0.4,)*3)),
    union(cylinder(0.25,0,(0,0,0)), cylinder(0.25,1,(0,0,0))))``.
    """
    tree = ast.parse(text, mode="eval")

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in _CSG_FUNCS:
                raise ValueError(f"unknown shape or combinator: {ast.dump(node.func)}")
            if node.keywords:
                raise ValueError("keyword arguments are not part of the grammar")
            return _CSG_FUNCS[node.func.id](*[ev(a) for a in node.args])
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return node.value
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
            return -ev(node.operand)
        if isinstance(node, ast.Tuple):
            return tuple(ev(e) for e in node.elts)
        if isinstance(node, ast.BinOp) and isinstance(node.op, ast.Mult):
            # allows the (0.4,)*3 tuple-repeat shorthand
            return ev(node.left) * ev(node.right)
        raise ValueError(f"disallowed syntax in geometry expression: {ast.dump(node)}")

    out = ev(tree)
    if not isinstance(out, ImplicitFunction):
        raise ValueError("geometry expression must produce a shape")
    return out


def listing_csg():
    """The reference composite: a filleted cube with three circular bores."""
    return difference(
        intersection(sphere(0.5, (0.0, 0.0, 0.0)), box((-0.4,) * 3, (0.4,) * 3)),
        union(
            cylinder(0.25, 0, (0.0, 0.0, 0.0)),
            cylinder(0.25, 1, (0.0, 0.0, 0.0)),
            cylinder(0.25, 2, (0.0, 0.0, 0.0)),
        ),
    )


# ---------------------------------------------------------------------------
# sampling helpers
# ---------------------------------------------------------------------------


def _eval_lattice(f, coords):
    """f over the tensor grid of per-dim coordinate vectors, shaped to it."""
    mesh = np.meshgrid(*coords, indexing="ij")
    pts = np.stack([m.reshape(-1) for m in mesh], axis=1)
    return f(pts).reshape(mesh[0].shape)


def _axis_nodes(geom, b, d):
    return geom.prob_lo[d] + (
        np.arange(b.lo[d], b.hi[d] + 2) - geom.domain.lo[d]
    ) * geom.cell_size[d]


def _axis_centers(geom, b, d):
    return geom.prob_lo[d] + (
        np.arange(b.lo[d], b.hi[d] + 1) - geom.domain.lo[d] + 0.5
    ) * geom.cell_size[d]


def _axis_sub(geom, b, d, s):
    idx = np.arange(b.extents()[d] * s)
    return geom.prob_lo[d] + (
        (b.lo[d] - geom.domain.lo[d]) + (idx + 0.5) / s
    ) * geom.cell_size[d]


def _classify_box(f, geom, b):
    dim = b.dim
    nodes = _eval_lattice(f, [_axis_nodes(geom, b, d) for d in range(dim)])
    centers = _eval_lattice(f, [_axis_centers(geom, b, d) for d in range(dim)])
    neg = nodes < 0.0
    pos = nodes > 0.0
    all_neg = np.ones(tuple(b.extents()), dtype=bool)
    all_pos = np.ones(tuple(b.extents()), dtype=bool)
    for corner in itertools.product((0, 1), repeat=dim):
        sl = tuple(slice(c, c + e) for c, e in zip(corner, b.extents()))
        all_neg &= neg[sl]
        all_pos &= pos[sl]
    all_neg &= centers < 0.0
    all_pos &= centers > 0.0
    flags = np.full(tuple(b.extents()), CUT, dtype=np.int8)
    flags[all_neg] = REGULAR
    flags[all_pos] = COVERED
    return flags


def classify(f, geom, ba, dm=None):
    """Per-cell flags from the 2^D corner samples plus the center tie-guard."""
    if dm is None:
        dm = DistributionMapping.single_rank(len(ba))
    out = FabArray(ba, dm, ncomp=1, ngrow=0, dtype=np.int8)
    for g in range(len(ba)):
        out.fab(g).valid(0)[...] = _classify_box(f, geom, ba[g])
    return out


# ---------------------------------------------------------------------------
# moments
# ---------------------------------------------------------------------------


class EBLevelData:
    """Cut-cell geometry moments for one level.

    volfrac is the fluid fraction; centroids are cell-relative offsets in
    units of dx (each component in [-0.5, 0.5]); area_lo/area_hi hold the
    per-dimension face fluid fractions; eb_area is in units of dx^(D-1).
    """

    def __init__(self, geom, ba, dm, subsamples):
        self.geom = geom
        self.ba = ba
        self.dm = dm
        self.subsamples = int(subsamples)
        dim = geom.dim
        self.flags = FabArray(ba, dm, 1, 0, dtype=np.int8)
        self.volfrac = FabArray(ba, dm, 1, 0)
        self.centroid = FabArray(ba, dm, dim, 0)
        self.area_lo = FabArray(ba, dm, dim, 0)
        self.area_hi = FabArray(ba, dm, dim, 0)
        self.face_cent_lo = FabArray(ba, dm, dim * dim, 0)
        self.face_cent_hi = FabArray(ba, dm, dim * dim, 0)
        self.eb_area = FabArray(ba, dm, 1, 0)
        self.eb_normal = FabArray(ba, dm, dim, 0)
        self.eb_centroid = FabArray(ba, dm, dim, 0)
        self.diagnostics = []


def compute_moments(f, geom, ba, subsamples=4, dm=None):
    """Subsampled cut-cell moments; s**D interior and s**(D-1) face samples.

    The boundary area and normal come from the face-balance vector
    v_d = aLo_d - aHi_d (divergence theorem), so A_eb = |v| and
    normal = v/|v| points from fluid into body.  A cut-flagged cell whose
    face balance cancels exactly is reflagged by majority vote and logged
    in diagnostics.
    """
    s = int(subsamples)
    if s < 2:
        raise ValueError("subsamples must be >= 2")
    if dm is None:
        dm = DistributionMapping.single_rank(len(ba))
    dim = geom.dim
    data = EBLevelData(geom, ba, dm, s)
    sub_off = (np.arange(s) + 0.5) / s - 0.5  # cell-relative subsample offsets
    for g in range(len(ba)):
        b = ba[g]
        ext = tuple(b.extents())
        flags = _classify_box(f, geom, b)

        # interior subsamples: shape (e0*s, e1*s, ...) -> (e0, s, e1, s, ...)
        vals = _eval_lattice(f, [_axis_sub(geom, b, d, s) for d in range(dim)])
        fluid = vals < 0.0
        split = fluid.reshape(tuple(x for e in ext for x in (e, s)))
        sum_axes = tuple(range(1, 2 * dim, 2))
        count = split.sum(axis=sum_axes)
        vol = count / float(s**dim)
        data.volfrac.fab(g).valid(0)[...] = vol

        cent = np.zeros((dim,) + ext)
        denom = np.maximum(count, 1)
        for d in range(dim):
            shape = [1] * (2 * dim)
            shape[2 * d + 1] = s
            w = sub_off.reshape(shape)
            cent[d] = (split * w).sum(axis=sum_axes) / denom
        data.centroid.fab(g).valid()[...] = cent

        # face fractions and centroids per dimension
        alo = np.zeros((dim,) + ext)
        ahi = np.zeros((dim,) + ext)
        fcl = np.zeros((dim * dim,) + ext)
        fch = np.zeros((dim * dim,) + ext)
        for d in range(dim):
            coords = [
                _axis_nodes(geom, b, e) if e == d else _axis_sub(geom, b, e, s)
                for e in range(dim)
            ]
            fvals = _eval_lattice(f, coords) < 0.0
            # collapse transverse subsamples per face
            shape = []
            for e in range(dim):
                if e == d:
                    shape.append(ext[e] + 1)
                else:
                    shape.extend((ext[e], s))
            fsplit = fvals.reshape(tuple(shape))
            t_axes = []
            pos = 0
            for e in range(dim):
                if e == d:
                    pos += 1
                else:
                    t_axes.append(pos + 1)
                    pos += 2
            t_axes = tuple(t_axes)
            fcount = fsplit.sum(axis=t_axes)
            frac = fcount / float(s ** (dim - 1))
            sl_lo = tuple(slice(0, ext[e]) if e == d else slice(None) for e in range(dim))
            sl_hi = tuple(slice(1, ext[e] + 1) if e == d else slice(None) for e in range(dim))
            alo[d] = frac[sl_lo]
            ahi[d] = frac[sl_hi]
            fdenom = np.maximum(fcount, 1)
            for e in range(dim):
                comp = d * dim + e
                if e == d:
                    fcl[comp] = -0.5
                    fch[comp] = 0.5
                    continue
                wshape = [1] * len(shape)
                w_axis = t_axes[[x for x in range(dim) if x != d].index(e)]
                wshape[w_axis] = s
                w = sub_off.reshape(wshape)
                fcent = (fsplit * w).sum(axis=t_axes) / fdenom
                fcl[comp] = fcent[sl_lo]
                fch[comp] = fcent[sl_hi]
        data.area_lo.fab(g).valid()[...] = alo
        data.area_hi.fab(g).valid()[...] = ahi
        data.face_cent_lo.fab(g).valid()[...] = fcl
        data.face_cent_hi.fab(g).valid()[...] = fch

        # boundary area/normal from the face balance
        v = alo - ahi
        vmag = np.sqrt((v**2).sum(axis=0))
        cut = flags == CUT
        degenerate = cut & (vmag == 0.0)
        if degenerate.any():
            for cell in np.argwhere(degenerate):
                vote = REGULAR if vol[tuple(cell)] >= 0.5 else COVERED
                flags[tuple(cell)] = vote
                data.diagnostics.append(
                    (g, tuple(int(c + b.lo[d]) for d, c in enumerate(cell)), vote)
                )
            cut = cut & ~degenerate
        area = np.where(cut, vmag, 0.0)
        normal = np.where(cut & (vmag > 0), v / np.maximum(vmag, 1e-300), 0.0)
        data.eb_area.fab(g).valid(0)[...] = area
        data.eb_normal.fab(g).valid()[...] = normal

        # boundary centroid: midpoints of sign-changing subsample pairs
        csum = np.zeros((dim,) + ext)
        ccount = np.zeros(ext)
        sgn = vals < 0.0
        for d in range(dim):
            full = tuple(x for e in ext for x in (e, s))
            sg = sgn.reshape(full)
            axis = 2 * d + 1
            a = np.take(sg, np.arange(s - 1), axis=axis)
            bb = np.take(sg, np.arange(1, s), axis=axis)
            change = a != bb  # (..., s-1, ...) pairs within one cell
            pair_mid = (sub_off[:-1] + sub_off[1:]) / 2.0
            for e in range(dim):
                shape = [1] * (2 * dim)
                if e == d:
                    shape[axis] = s - 1
                    w = pair_mid.reshape(shape)
                else:
                    shape[2 * e + 1] = s
                    w = sub_off.reshape(shape)
                csum[e] += (change * w).sum(axis=sum_axes)
            ccount += change.sum(axis=sum_axes)
        ebc = csum / np.maximum(ccount, 1)
        data.eb_centroid.fab(g).valid()[...] = np.where(cut, ebc, 0.0)

        data.flags.fab(g).valid(0)[...] = flags
    return data


# ---------------------------------------------------------------------------
# small-cell redistribution
# ---------------------------------------------------------------------------


def redistribute_small_cells(update, ebdata, threshold):
    """Shift the unstable share of small-cut-cell updates onto neighbors.

    A cut cell with volfrac below the threshold keeps volfrac*u of its
    update; the removed volume-weighted mass goes to face-sharing
    non-covered neighbors in proportion to their volume fractions, so the
    global volume-weighted sum is untouched.
    """
    geom = ebdata.geom
    dom = geom.domain
    dim = geom.dim
    kappa = gather_global(ebdata.volfrac, dom, comp=0)
    flags = gather_global(ebdata.flags, dom, comp=0)
    small = np.argwhere((flags == CUT) & (kappa < float(threshold)) & (kappa > 0.0))
    if small.size == 0:
        return
    ext = tuple(dom.extents())
    for comp in range(update.ncomp):
        u = gather_global(update, dom, comp=comp)
        for cell in small:
            cell = tuple(int(c) for c in cell)
            k = kappa[cell]
            nbrs = []
            for d in range(dim):
                for step in (-1, 1):
                    nb = list(cell)
                    nb[d] += step
                    if nb[d] < 0 or nb[d] >= ext[d]:
                        if not geom.periodic[d]:
                            continue
                        nb[d] %= ext[d]
                    nb = tuple(nb)
                    if flags[nb] != COVERED:
                        nbrs.append(nb)
            wsum = sum(kappa[n] for n in nbrs)
            if not nbrs or wsum <= 0.0:
                raise RuntimeError(
                    f"small cell {cell} has no eligible neighbor to absorb its update"
                )
            excess = (1.0 - k) * u[cell]
            removed = k * excess  # volume-weighted mass leaving the small cell
            u[cell] -= excess
            # mass share kappa_n * removed / wsum, so the value bump is even
            for n in nbrs:
                u[n] += removed / wsum
        # scatter back
        for g in range(len(update.ba)):
            b = update.ba[g]
            sl = tuple(
                slice(b.lo[d] - dom.lo[d], b.hi[d] - dom.lo[d] + 1) for d in range(dim)
            )
            update.fab(g).valid(comp)[...] = u[sl]


# ---------------------------------------------------------------------------
# level sets and pruning
# ---------------------------------------------------------------------------


class LevelSet:
    """Implicit-function values at nodes, optionally on a refined lattice.

    Stores the raw composite value, not a recomputed distance; min/max CSG
    of signed distances is distance-like near the surface but not exact at
    every point.
    """

    def __init__(self, fa, geom, refine_ratio):
        self.fa = fa
        self.geom = geom
        self.refine_ratio = refine_ratio


def build_level_set(f, geom, ba, refine_ratio=1, dm=None):
    if isinstance(refine_ratio, int):
        refine_ratio = IntVect((refine_ratio,) * geom.dim)
    elif not isinstance(refine_ratio, IntVect):
        refine_ratio = IntVect(refine_ratio)
    if any(r < 1 for r in refine_ratio):
        raise ValueError("refine_ratio must be >= 1")
    geom_f = geom.refine(refine_ratio)
    node_t = IndexType.node(geom.dim)
    ba_nodes = ba.refine(refine_ratio).convert(node_t)
    if dm is None:
        dm = DistributionMapping.single_rank(len(ba_nodes))
    fa = FabArray(ba_nodes, dm, 1, 0)
    for g in range(len(ba_nodes)):
        nb = ba_nodes[g]
        coords = [
            geom_f.prob_lo[d]
            + (np.arange(nb.lo[d], nb.hi[d] + 1) - geom_f.domain.lo[d])
            * geom_f.cell_size[d]
            for d in range(geom.dim)
        ]
        fa.fab(g).valid(0)[...] = _eval_lattice(f, coords)
    return LevelSet(fa, geom_f, refine_ratio)


def covered_box_predicate(f, geom):
    """Predicate for BoxArray.prune: true iff the whole box is inside the
    body (every cell classifies covered)."""

    def pred(b):
        nodes = _eval_lattice(f, [_axis_nodes(geom, b, d) for d in range(b.dim)])
        if not (nodes > 0.0).all():
            return False
        centers = _eval_lattice(f, [_axis_centers(geom, b, d) for d in range(b.dim)])
        return bool((centers > 0.0).all())

    return pred
