"""Neighbour search and grid-decoding tests against sort-based oracles."""

import numpy as np
import pytest

from gridtnp.attnproc import AttentionConfig, MHCABlock
from gridtnp.gridenc import GridSpec, PseudoTokenGrid
from gridtnp.griddec import (
    _batch_neighbours,
    full_cross_attend,
    full_gather_cost,
    neighbour_indices,
    nn_cross_attend,
    nn_gather_cost,
    per_dim_neighbour_count,
)
from gridtnp.tensor import Tensor

CFG = AttentionConfig(dz=8, heads=2, d_v=4, d_qk=4)


def sort_oracle_sets(targets, grid, k):
    """Per-dimension sort oracle: take the min(k_dim, count) nearest axis
    coordinates per dimension (ties toward the lower coordinate), form the
    Cartesian product, and drop out-of-bounds members on non-wrap axes."""
    k_dim = per_dim_neighbour_count(k, grid.dim)
    out = []
    for t in targets:
        per_dim = []
        for d in range(grid.dim):
            m = grid.counts[d]
            coords = grid.axis_coords(d)
            delta = np.abs(t[d] - coords)
            if grid.wrap[d]:
                period = grid.extents[d][1] - grid.extents[d][0]
                delta = np.minimum(delta, period - delta)
            order = np.lexsort((np.arange(m), np.round(delta, 12)))
            keep = order[: min(k_dim, m)]
            if not grid.wrap[d]:
                # centred band semantics: clipped members are dropped, so a
                # band member beyond the edge is simply absent
                center = keep[0]
                lo = center - k_dim // 2
                band = [c for c in range(lo, lo + k_dim) if 0 <= c < m]
                keep = band if k_dim < m else list(range(m))
            per_dim.append(sorted(set(int(c) for c in keep)))
        cells = set()
        from itertools import product

        for combo in product(*per_dim):
            cells.add(int(np.ravel_multi_index(combo, grid.counts)))
        out.append(cells)
    return out


class TestPerDimCount:
    def test_paper_configurations(self):
        assert per_dim_neighbour_count(9, 2) == 3
        assert per_dim_neighbour_count(27, 3) == 3

    def test_general_values(self):
        assert per_dim_neighbour_count(1, 3) == 1
        assert per_dim_neighbour_count(5, 2) == 3
        assert per_dim_neighbour_count(16, 2) == 4
        assert per_dim_neighbour_count(1000, 3) == 10
        with pytest.raises(ValueError):
            per_dim_neighbour_count(0, 2)


class TestNeighbourIndices:
    def test_k1_is_nearest_cell(self, rng):
        g = GridSpec((5, 9), ((0.0, 4.0), (0.0, 8.0)), (False, False))
        targets = rng.uniform([0, 0], [4, 8], size=(50, 2))
        ni = neighbour_indices(targets, g, 1)
        assert ni.indices.shape == (50, 1) and ni.valid.all()
        from gridtnp.gridenc import assign_to_grid

        np.testing.assert_array_equal(ni.indices[:, 0], assign_to_grid(targets, g).cell_of)

    def test_200_targets_match_sort_oracle_5x9(self, rng):
        g = GridSpec((5, 9), ((0.0, 4.0), (0.0, 8.0)), (False, False))
        targets = rng.uniform([0, 0], [4, 8], size=(200, 2))
        ni = neighbour_indices(targets, g, 9)
        want = sort_oracle_sets(targets, g, 9)
        for i in range(200):
            got = set(ni.indices[i][ni.valid[i]].tolist())
            assert got == want[i], (i, targets[i])

    def test_corner_target_keeps_four(self):
        g = GridSpec((5, 9), ((0.0, 4.0), (0.0, 8.0)), (False, False))
        ni = neighbour_indices(np.array([[0.0, 0.0]]), g, 9)
        assert ni.valid.sum() == 4
        got = set(ni.indices[0][ni.valid[0]].tolist())
        assert got == {0, 1, 9, 10}

    def test_3d_with_wrap_matches_sort_oracle(self, rng):
        g = GridSpec(
            (5, 9, 3),
            ((0.0, 4.0), (-180.0, 180.0), (0.0, 2.0)),
            (False, True, False),
        )
        targets = np.stack(
            [rng.uniform(0, 4, 120), rng.uniform(-180, 180, 120), rng.uniform(0, 2, 120)],
            axis=-1,
        )
        ni = neighbour_indices(targets, g, 27)
        want = sort_oracle_sets(targets, g, 27)
        for i in range(120):
            got = set(ni.indices[i][ni.valid[i]].tolist())
            assert got == want[i]

    def test_wrap_crosses_dateline(self):
        g = GridSpec((5, 9), ((0.0, 4.0), (-180.0, 180.0)), (False, True))
        ni = neighbour_indices(np.array([[2.0, 179.9]]), g, 9)
        got = set(ni.indices[0][ni.valid[0]].tolist())
        # oracle computed in unwrapped doubled coordinates
        lon_nodes = g.axis_coords(1)
        doubled = np.concatenate([lon_nodes, lon_nodes + 360.0])
        order = np.argsort(np.abs(179.9 - doubled), kind="stable")[:3]
        lon_idx = set(int(i % 9) for i in order)
        lat_idx = {1, 2, 3}
        want = {int(np.ravel_multi_index((a, b), (5, 9))) for a in lat_idx for b in lon_idx}
        assert got == want
        assert ni.valid.all()  # wrap dimension never clips

    def test_translation_consistency(self, rng):
        base = GridSpec((6, 7), ((0.0, 5.0), (0.0, 6.0)), (False, False))
        offset = np.array([13.5, -2.25])
        moved = GridSpec(
            (6, 7),
            ((0.0 + offset[0], 5.0 + offset[0]), (0.0 + offset[1], 6.0 + offset[1])),
            (False, False),
        )
        targets = rng.uniform([0, 0], [5, 6], size=(80, 2))
        a = neighbour_indices(targets, base, 9)
        b = neighbour_indices(targets + offset, moved, 9)
        np.testing.assert_array_equal(a.indices, b.indices)
        np.testing.assert_array_equal(a.valid, b.valid)

    def test_even_band_biases_to_lower_side(self):
        g = GridSpec((10,), ((0.0, 9.0),), (False,))
        ni = neighbour_indices(np.array([[5.2]]), g, 4)  # k_dim = 4
        got = set(ni.indices[0][ni.valid[0]].tolist())
        assert got == {3, 4, 5, 6}

    def test_whole_axis_band_when_k_exceeds_count(self):
        g = GridSpec((4, 4), ((0.0, 1.0), (0.0, 1.0)), (False, False))
        ni = neighbour_indices(np.array([[0.9, 0.1]]), g, 16)
        assert ni.valid.all() and set(ni.indices[0].tolist()) == set(range(16))

    def test_gather_count_bound(self, rng):
        g = GridSpec((8, 8), ((0.0, 1.0), (0.0, 1.0)), (False, False))
        targets = rng.uniform(0, 1, size=(64, 2))
        ni = neighbour_indices(targets, g, 9)
        assert ni.gather_count <= 9 * 64


class TestCrossAttendDecoders:
    def _ptg(self, rng, counts=(8, 8)):
        g = GridSpec(counts, tuple((0.0, 1.0) for _ in counts), tuple(False for _ in counts))
        u = Tensor(rng.normal(size=(2,) + counts + (8,)))
        return PseudoTokenGrid(u=u, grid=g, provenance="pt")

    def test_k1_attends_to_nearest_node_only(self, rng):
        ptg = self._ptg(rng)
        block = MHCABlock(CFG, rng)
        xt = rng.uniform(0, 1, size=(2, 6, 2))
        idx, valid = _batch_neighbours(xt, ptg.grid, 1)
        zq = Tensor(rng.normal(size=(2, 6, 8)))
        q = Tensor(zq.data.reshape(12, 1, 8))
        from gridtnp.gridenc import batched_gather
        from gridtnp import tensor as T

        keys = T.reshape(batched_gather(ptg.flat(), idx), (12, 1, 8))
        w = block.attention_weights(q, keys, valid.reshape(12, 1, 1))
        np.testing.assert_allclose(w, 1.0, atol=1e-15)

    def test_whole_grid_k_equals_full(self, rng):
        ptg = self._ptg(rng, counts=(4, 4))
        block = MHCABlock(CFG, rng)
        xt = rng.uniform(0, 1, size=(2, 5, 2))
        zq = Tensor(rng.normal(size=(2, 5, 8)))
        idx, valid = _batch_neighbours(xt, ptg.grid, 16)
        a = nn_cross_attend(zq, ptg, idx, valid, block).data
        b = full_cross_attend(zq, ptg, block).data
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_nn_matches_per_target_loop(self, rng):
        g = GridSpec((8, 8), ((0.0, 1.0), (0.0, 1.0)), (False, False))
        ptg = PseudoTokenGrid(Tensor(rng.normal(size=(1, 8, 8, 8))), g, "pt")
        block = MHCABlock(CFG, rng)
        xt = rng.uniform(0, 1, size=(1, 10, 2))
        zq = Tensor(rng.normal(size=(1, 10, 8)))
        idx, valid = _batch_neighbours(xt, ptg.grid, 9)
        got = nn_cross_attend(zq, ptg, idx, valid, block).data[0]
        flat = ptg.u.data.reshape(1, 64, 8)
        for t in range(10):
            keys = flat[0][idx[0, t][valid[0, t]]]
            want = block(
                Tensor(zq.data[0, t][None, None]),
                Tensor(keys[None]),
                np.ones((1, 1, keys.shape[0]), dtype=bool),
            ).data[0, 0]
            np.testing.assert_allclose(got[t], want, atol=1e-10)

    def test_full_single_pseudo_token(self, rng):
        g = GridSpec((1,), ((0.0, 1.0),), (False,))
        ptg = PseudoTokenGrid(Tensor(rng.normal(size=(1, 1, 8))), g, "pt")
        block = MHCABlock(CFG, rng)
        zq = Tensor(rng.normal(size=(1, 4, 8)))
        w = block.attention_weights(zq, ptg.flat(), None)
        np.testing.assert_allclose(w, 1.0, atol=1e-15)

    def test_full_identical_grid_tokens_independent_of_m(self, rng):
        block = MHCABlock(CFG, rng)
        token = rng.normal(size=8)
        zq = Tensor(rng.normal(size=(1, 3, 8)))
        outs = []
        for m in (1, 4, 9):
            g = GridSpec((m,), ((0.0, 1.0),), (False,))
            u = Tensor(np.tile(token, (1, m, 1)))
            outs.append(full_cross_attend(zq, PseudoTokenGrid(u, g, "pt"), block).data)
        np.testing.assert_allclose(outs[0], outs[1], atol=1e-10)
        np.testing.assert_allclose(outs[0], outs[2], atol=1e-10)

    def test_full_matches_loop_oracle(self, rng):
        ptg = self._ptg(rng, counts=(3, 2))
        block = MHCABlock(CFG, rng)
        zq = Tensor(rng.normal(size=(2, 4, 8)))
        got = full_cross_attend(zq, ptg, block).data
        flat = ptg.u.data.reshape(2, 6, 8)
        for b in range(2):
            for t in range(4):
                want = block(
                    Tensor(zq.data[b, t][None, None]),
                    Tensor(flat[b][None]),
                    None,
                ).data[0, 0]
                np.testing.assert_allclose(got[b, t], want, atol=1e-10)


class TestCostHelpers:
    def test_gather_costs(self):
        assert nn_gather_cost(3, 64) == 192
        assert full_gather_cost(32, 64) == 2048
        assert full_gather_cost(32, 64) / nn_gather_cost(3, 64) > 1.5
