"""BoxArray: hash-backed queries against brute force, and layout surgery."""

import numpy as np
import pytest

from amrkit import counters
from amrkit.boxarray import BoxArray
from amrkit.index_space import Box, IndexType, IntVect

from conftest import random_box, random_cover


def brute_intersections(boxes, q):
    out = []
    for i, b in enumerate(boxes):
        ov = b.intersect(q)
        if not ov.is_empty():
            out.append((i, ov))
    return out


def test_validate_rejects_overlap():
    with pytest.raises(ValueError):
        BoxArray([Box(IntVect(0, 0), IntVect(3, 3)), Box(IntVect(3, 3), IntVect(5, 5))])


def test_hash_matches_brute_force(rng):
    for trial in range(60):
        dim = int(rng.integers(1, 4))
        domain = Box(IntVect.zero(dim), IntVect([int(rng.integers(7, 32))] * dim))
        ba = random_cover(rng, domain, nsplits=int(rng.integers(2, 10)))
        for _ in range(5):
            q = random_box(rng, dim, span=20, max_ext=10)
            got = sorted(ba.intersections(q), key=lambda t: t[0])
            want = sorted(brute_intersections(list(ba), q), key=lambda t: t[0])
            assert got == want


def test_query_bin_cost_bounded(rng):
    # a query no larger than the hash cell examines at most 3^D bins
    for trial in range(40):
        dim = int(rng.integers(1, 4))
        domain = Box(IntVect.zero(dim), IntVect([31] * dim))
        ba = random_cover(rng, domain, nsplits=8)
        side = max(b.extents()[d] for b in ba for d in range(dim))
        q_lo = [int(rng.integers(0, 32 - 1))] * dim
        q = Box(IntVect(q_lo), IntVect([min(31, l + side - 1) for l in q_lo]))
        counters.reset("hash_bins_examined", "hash_queries")
        ba.intersections(q)
        assert counters.get("hash_bins_examined") <= 3**dim


def test_owner_at_single_bin(rng):
    dim = 2
    domain = Box(IntVect.zero(dim), IntVect(15, 15))
    ba = random_cover(rng, domain, nsplits=6)
    for _ in range(50):
        p = IntVect([int(rng.integers(-2, 18)) for _ in range(dim)])
        counters.reset("hash_bins_examined")
        got = ba.owner_at(p)
        assert counters.get("hash_bins_examined") <= 1
        want = next((i for i, b in enumerate(ba) if b.contains(p)), None)
        assert got == want


def test_max_size_partitions_and_bounds(rng):
    for _ in range(30):
        dim = int(rng.integers(1, 4))
        domain = Box(IntVect.zero(dim), IntVect([int(rng.integers(8, 40))] * dim))
        m = int(rng.integers(4, 12))
        ba = BoxArray([domain]).max_size(m)
        assert ba.num_cells() == domain.num_cells()
        for b in ba:
            for d in range(dim):
                assert b.extents()[d] <= m
        # still a disjoint cover
        assert ba.contains_box(domain)


def test_refine_coarsen_round_trip(rng):
    domain = Box(IntVect.zero(2), IntVect(31, 31))
    ba = random_cover(rng, domain, nsplits=7)
    assert ba.refine(2).coarsen(2).dump() == ba.dump()
    assert ba.refine(2).num_cells() == 4 * ba.num_cells()
    assert ba.coarsenable(1)


def test_convert_node_shares_faces():
    ba = BoxArray([Box(IntVect(0, 0), IntVect(3, 3)), Box(IntVect(4, 0), IntVect(7, 3))])
    nodal = ba.convert(IndexType.node(2))
    # nodal boxes overlap on the shared face; validation must allow that
    assert nodal[0].intersects(nodal[1])


def test_prune_keeps_order():
    domain = Box(IntVect.zero(2), IntVect(15, 15))
    ba = BoxArray([domain]).max_size(8)
    pruned = ba.prune(lambda b: b.lo[0] == 0)
    assert len(pruned) == 2
    assert all(b.lo[0] == 8 for b in pruned)


def test_minimal_box_and_complement(rng):
    domain = Box(IntVect.zero(2), IntVect(23, 23))
    ba = random_cover(rng, domain, nsplits=5)
    assert ba.minimal_box() == domain
    hole = BoxArray([ba[0]])
    rest = hole.complement_in(domain)
    assert sum(b.num_cells() for b in rest) == domain.num_cells() - ba[0].num_cells()
    for b in rest:
        assert not b.intersects(ba[0])


def test_uid_changes_with_layout():
    a = BoxArray([Box(IntVect(0, 0), IntVect(3, 3))])
    b = BoxArray([Box(IntVect(0, 0), IntVect(3, 3))])
    c = BoxArray([Box(IntVect(0, 0), IntVect(4, 3))])
    assert a.uid != c.uid
    assert a.uid != b.uid  # identity, not structural equality
