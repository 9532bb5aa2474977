"""Mesh generation, refinement, pairing and phase-grid I/O."""

import numpy as np
import numpy.testing as npt
import pytest

from fehmm.errors import MeshError, PairingError
from fehmm.fem_core import element_kernel, shape_eval
from fehmm.mesh import (PhaseGrid, generate_structured, mesh_from_phase_grid,
                        pair_periodic_nodes, read_phase_grid, refine_uniform,
                        write_phase_grid)


def checkerboard(n):
    ix, iy = np.meshgrid(np.arange(n), np.arange(n))
    return PhaseGrid(n, n, (1 + (ix + iy) % 2).ravel().copy())


def jacobians(mesh):
    k = element_kernel(mesh.kind)
    coords = mesh.nodes[mesh.elems]
    jac = np.einsum("qni,enj->eqij", k.dN, coords)
    return jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]


class TestGenerateStructured:
    def test_beam_mesh_counts(self):
        m = generate_structured(5000.0, 1000.0, 5, 1)
        assert m.n_elems == 5
        assert m.n_nodes == 12
        assert m.ndof == 24

    def test_unit_cell(self):
        m = generate_structured(1.0, 1.0, 1, 1)
        assert m.n_elems == 1 and m.n_nodes == 4

    def test_tri_split_counts(self):
        m = generate_structured(1.0, 1.0, 2, 2, kind="tri3")
        assert m.n_elems == 8 and m.n_nodes == 9

    def test_jacobians_positive(self):
        for kind in ("quad4", "tri3"):
            m = generate_structured(3.0, 2.0, 4, 3, kind=kind)
            assert np.all(jacobians(m) > 0)

    @pytest.mark.parametrize("args", [(0.0, 1.0, 1, 1), (1.0, -1.0, 1, 1),
                                      (1.0, 1.0, 0, 1), (1.0, 1.0, 1, 0)])
    def test_invalid_arguments(self, args):
        with pytest.raises(ValueError):
            generate_structured(*args)


class TestPhaseGridMesh:
    def test_checkerboard_phases(self):
        grid = PhaseGrid(2, 2, np.array([1, 2, 2, 1]))
        m = mesh_from_phase_grid(grid, 1.0)
        assert m.n_elems == 4
        assert sorted(m.phase.tolist()) == [1, 1, 2, 2]
        # phase order follows cells: row 0 at the bottom
        npt.assert_array_equal(m.phase, [1, 2, 2, 1])

    def test_uniform_grid(self):
        grid = PhaseGrid(4, 4, np.ones(16, dtype=np.int64))
        m = mesh_from_phase_grid(grid, 2.0)
        assert m.n_elems == 16 and np.all(m.phase == 1)

    def test_node_count_48(self):
        grid = PhaseGrid(48, 48, np.ones(48 * 48, dtype=np.int64))
        m = mesh_from_phase_grid(grid, 1.0)
        assert m.n_elems == 2304 and m.n_nodes == 2401

    def test_tri_phases_inherit_pixel(self):
        grid = PhaseGrid(2, 1, np.array([1, 2]))
        m = mesh_from_phase_grid(grid, 1.0, kind="tri3")
        npt.assert_array_equal(m.phase, [1, 1, 2, 2])

    def test_bad_labels_rejected(self):
        with pytest.raises(ValueError):
            PhaseGrid(2, 1, np.array([1, 3]))


class TestRefineUniform:
    def test_single_quad(self):
        m = refine_uniform(generate_structured(1.0, 1.0, 1, 1))
        assert m.n_elems == 4 and m.n_nodes == 9

    def test_beam_ndof(self):
        m = refine_uniform(generate_structured(5000.0, 1000.0, 5, 1))
        assert m.grid == (10, 2)
        assert m.ndof == 66

    def test_two_refinements_quadruple_twice(self):
        m = generate_structured(1.0, 1.0, 1, 1)
        assert refine_uniform(refine_uniform(m)).n_elems == 16

    def test_phase_inheritance(self):
        m = mesh_from_phase_grid(checkerboard(2), 1.0)
        r = refine_uniform(m)
        # bottom-left pixel (phase 1) becomes a 2x2 block of phase-1 cells
        npt.assert_array_equal(r.phase.reshape(4, 4)[:2, :2],
                               [[1, 1], [1, 1]])
        assert np.count_nonzero(r.phase == 1) == 8

    def test_parent_nodes_nested(self):
        m = generate_structured(3.0, 2.0, 3, 2)
        r = refine_uniform(m)
        for p in m.nodes:
            d = np.linalg.norm(r.nodes - p, axis=1).min()
            assert d < 1e-12

    def test_linear_field_exact_at_child_nodes(self):
        # evaluate a linear nodal field of the parent at child nodes
        m = generate_structured(2.0, 1.0, 2, 1)
        r = refine_uniform(m)
        a = np.array([[0.3, -0.7], [1.1, 0.4]])
        parent_vals = m.nodes @ a.T
        kernel_pts = {tuple(np.round(p, 12)): None for p in r.nodes}
        # locate child nodes in parent elements by brute force
        for p in r.nodes:
            for e in range(m.n_elems):
                xy = m.nodes[m.elems[e]]
                lo, hi = xy.min(axis=0), xy.max(axis=0)
                if np.all(p >= lo - 1e-12) and np.all(p <= hi + 1e-12):
                    xi = 2 * (p - lo) / (hi - lo) - 1.0
                    N, _ = shape_eval("quad4", xi)
                    val = N @ parent_vals[m.elems[e]]
                    npt.assert_allclose(val, p @ a.T, atol=1e-12)
                    break

    def test_unstructured_rejected(self):
        m = generate_structured(1.0, 1.0, 2, 2)
        bad = type(m)(m.nodes.copy(), m.elems.copy(), m.kind, m.phase.copy(),
                      grid=None)
        with pytest.raises(MeshError):
            refine_uniform(bad)


class TestPeriodicPairing:
    def test_single_quad_no_pairs(self):
        p = pair_periodic_nodes(generate_structured(1.0, 1.0, 1, 1), 1.0)
        assert len(p.pairs) == 0 and len(p.corners) == 4

    def test_2x2_pairs(self):
        # 4 non-corner boundary nodes pair across edges: 2 node pairs
        p = pair_periodic_nodes(generate_structured(1.0, 1.0, 2, 2), 1.0)
        assert len(p.pairs) == 2

    def test_4x4_pairs_enumeration(self):
        m = generate_structured(1.0, 1.0, 4, 4)
        p = pair_periodic_nodes(m, 1.0)
        boundary = 0
        for n in m.nodes:
            on = np.isclose(n, 0.0, atol=1e-12) | np.isclose(n, 1.0, atol=1e-12)
            boundary += int(on.any())
        assert len(p.pairs) == (boundary - 4) // 2 == 6

    @pytest.mark.parametrize("n", [2, 3, 5])
    def test_pair_lattice_vectors(self, n):
        m = generate_structured(1.0, 1.0, n, n)
        p = pair_periodic_nodes(m, 1.0)
        for a, b in p.pairs:
            d = m.nodes[b] - m.nodes[a]
            assert np.isclose(d, [1, 0], atol=1e-12).all() or \
                np.isclose(d, [0, 1], atol=1e-12).all()

    def test_each_noncorner_in_one_pair(self):
        p = pair_periodic_nodes(generate_structured(1.0, 1.0, 4, 4), 1.0)
        flat = p.pairs.ravel().tolist()
        assert len(flat) == len(set(flat))
        assert not set(flat) & set(p.corners.tolist())

    def test_unmatched_node_raises(self):
        m = generate_structured(1.0, 1.0, 3, 3)
        nodes = m.nodes.copy()
        nodes.setflags(write=True)
        mid = np.flatnonzero((np.abs(nodes[:, 0]) < 1e-12)
                             & (np.abs(nodes[:, 1] - 1.0 / 3.0) < 1e-9))[0]
        nodes[mid, 1] += 0.05
        bad = type(m)(nodes, m.elems.copy(), m.kind, m.phase.copy(), grid=m.grid)
        with pytest.raises(PairingError):
            pair_periodic_nodes(bad, 1.0)


class TestPhaseGridIO:
    def test_text_roundtrip(self, tmp_path):
        grid = checkerboard(4)
        path = tmp_path / "g.grid"
        write_phase_grid(path, grid)
        back = read_phase_grid(path)
        npt.assert_array_equal(back.cells, grid.cells)

    def test_text_row_order_top_first(self, tmp_path):
        path = tmp_path / "g.grid"
        path.write_text("2 2\n1 1\n2 2\n")
        grid = read_phase_grid(path)
        # first file row is the top of the domain
        npt.assert_array_equal(grid.as_array(), [[2, 2], [1, 1]])

    def test_pgm_threshold(self, tmp_path):
        path = tmp_path / "g.pgm"
        path.write_text("P2\n# comment\n2 2\n255\n0 255\n127 128\n")
        grid = read_phase_grid(path)
        npt.assert_array_equal(grid.as_array(), [[1, 2], [1, 2]][::-1])

    def test_tile(self):
        g = PhaseGrid(2, 2, np.array([1, 2, 2, 1])).tile(2)
        assert (g.nx, g.ny) == (4, 4)
        npt.assert_array_equal(g.as_array()[:2, :2], [[1, 2], [2, 1]])

    def test_volume_fractions(self):
        fr = checkerboard(4).volume_fractions()
        assert fr[1] == fr[2] == 0.5
