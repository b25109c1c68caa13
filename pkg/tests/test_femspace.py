import numpy as np
import pytest

from cromflow.femspace import (
    LINE_QP,
    LINE_QW,
    TRI_QP,
    TRI_QW,
    TaylorHoodSpace,
    p1_shape,
    p2_grad,
    p2_shape,
)
from cromflow.geometry import generate_empty_mesh, generate_obstacle_mesh


@pytest.fixture(scope="module")
def space():
    return TaylorHoodSpace(generate_empty_mesh(4))


def random_ref_points(count, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 1, size=(count, 2))
    flip = a.sum(axis=1) > 1.0
    a[flip] = 1.0 - a[flip]
    return a


class TestQuadrature:
    def test_tri_weights(self):
        assert np.all(TRI_QW > 0)
        assert abs(TRI_QW.sum() - 0.5) < 1e-15

    def test_line_weights(self):
        assert np.all(LINE_QW > 0)
        assert abs(LINE_QW.sum() - 1.0) < 1e-15

    @pytest.mark.parametrize("a,b", [(a, b) for a in range(6) for b in range(6 - a)])
    def test_tri_monomials_degree5(self, a, b):
        # exact integral of x^a y^b over the reference triangle
        from math import factorial

        exact = factorial(a) * factorial(b) / factorial(a + b + 2)
        got = np.sum(TRI_QW * TRI_QP[:, 0] ** a * TRI_QP[:, 1] ** b)
        assert abs(got - exact) < 1e-14

    @pytest.mark.parametrize("k", range(6))
    def test_line_monomials_degree5(self, k):
        assert abs(np.sum(LINE_QW * LINE_QP**k) - 1.0 / (k + 1)) < 1e-14

    def test_arbitrary_triangle_monomials(self):
        # map the rule to a skewed triangle and integrate x^a y^b
        verts = np.array([[0.2, -0.1], [1.3, 0.4], [0.5, 1.7]])
        jac = np.stack([verts[1] - verts[0], verts[2] - verts[0]], axis=-1)
        det = abs(np.linalg.det(jac))
        pts = verts[0] + TRI_QP @ jac.T
        rng = np.random.default_rng(3)
        for a in range(4):
            for b in range(4 - a):
                got = det * np.sum(TRI_QW * pts[:, 0] ** a * pts[:, 1] ** b)
                # oracle: dense subdivision quadrature via barycentric sampling
                ref = _poly_integral_on_triangle(verts, a, b)
                assert abs(got - ref) < 1e-13 * max(1.0, abs(ref))


def _poly_integral_on_triangle(verts, a, b):
    """Exact integral of x^a y^b via the barycentric power formula."""
    from math import factorial

    # expand (l0 v0 + l1 v1 + l2 v2) powers by multinomial over a fine rule:
    # use a degree-exact Gauss rule of very high order built from tensor Gauss
    from numpy.polynomial.legendre import leggauss

    xg, wg = leggauss(12)
    xg = 0.5 * (xg + 1.0)
    wg = 0.5 * wg
    # collapsed square -> triangle map
    total = 0.0
    jac = np.stack([verts[1] - verts[0], verts[2] - verts[0]], axis=-1)
    det = abs(np.linalg.det(jac))
    for xi, wi in zip(xg, wg):
        for yj, wj in zip(xg, wg):
            r, s = xi, yj * (1 - xi)
            w = wi * wj * (1 - xi)
            x, y = verts[0] + jac @ np.array([r, s])
            total += w * x**a * y**b
    return det * total


class TestShapeFunctions:
    def test_p2_lagrange_property(self):
        nodes = np.array(
            [[0, 0], [1, 0], [0, 1], [0.5, 0], [0.5, 0.5], [0, 0.5]], dtype=float
        )
        vals = p2_shape(nodes)
        assert np.allclose(vals, np.eye(6), atol=1e-14)

    def test_p1_centroid(self):
        assert np.allclose(p1_shape(np.array([1 / 3, 1 / 3])), [1 / 3, 1 / 3, 1 / 3])

    def test_partition_of_unity_and_grad_sum(self):
        pts = random_ref_points(1000)
        assert np.abs(p2_shape(pts).sum(axis=-1) - 1.0).max() < 1e-14
        assert np.abs(p2_grad(pts).sum(axis=-2)).max() < 1e-13
        assert np.abs(p1_shape(pts).sum(axis=-1) - 1.0).max() < 1e-14


class TestSpace:
    def test_dof_counts(self, space):
        mesh = space.mesh
        n_edges = space.edges.shape[0]
        assert space.n_u == 2 * (mesh.n_vertices + n_edges)
        assert space.n_p == mesh.n_vertices

    def test_interpolate_constant(self, space):
        u = space.interpolate_velocity(
            lambda xy: np.stack([np.ones(len(xy)), np.zeros(len(xy))], axis=-1)
        )
        ns = space.n_scalar
        assert np.allclose(u[:ns], 1.0) and np.allclose(u[ns:], 0.0)

    def test_p2_reproduces_quadratic(self, space):
        f = lambda xy: np.stack([xy[:, 0] ** 2, xy[:, 0] * xy[:, 1]], axis=-1)
        u = space.interpolate_velocity(f)
        assert space.velocity_l2(u, f) < 1e-12

    def test_p1_reproduces_linear(self, space):
        f = lambda xy: xy[:, 0] + xy[:, 1]
        p = space.interpolate_pressure(f)
        assert space.pressure_l2(p, f) < 1e-12

    def test_l2_norms(self, space):
        u = space.interpolate_velocity(
            lambda xy: np.stack([np.ones(len(xy)), np.zeros(len(xy))], axis=-1)
        )
        assert abs(space.velocity_l2(u) - 1.0) < 1e-13
        ux = space.interpolate_velocity(
            lambda xy: np.stack([xy[:, 0], np.zeros(len(xy))], axis=-1)
        )
        assert abs(space.velocity_l2(ux) - 1.0 / np.sqrt(3.0)) < 1e-13

    def test_error_against_self_is_zero(self, space):
        f = lambda xy: np.stack([xy[:, 1] ** 2, xy[:, 0]], axis=-1)
        u = space.interpolate_velocity(f)
        assert space.velocity_l2(u, f) < 1e-13

    def test_eval_basis_partition(self, space):
        pts = random_ref_points(50, seed=1)
        p2v, p2g, p1v = space.eval_basis(3, pts)
        assert np.abs(p2v.sum(axis=-1) - 1.0).max() < 1e-14
        assert np.abs(p2g.sum(axis=-2)).max() < 1e-12
        assert np.abs(p1v.sum(axis=-1) - 1.0).max() < 1e-14

    def test_face_normals_outward(self, space):
        mesh = space.mesh
        expected = {"L": [-1, 0], "R": [1, 0], "B": [0, -1], "T": [0, 1]}
        for side, n_exp in expected.items():
            for b in mesh.side_trace[side]:
                fd = space.face_data(b)
                assert np.allclose(fd.normal, n_exp)

    def test_obstacle_normals_point_into_hole(self):
        space = TaylorHoodSpace(generate_obstacle_mesh(4, "circle", 0.2))
        center = np.array([0.5, 0.5])
        for b, tag in enumerate(space.mesh.boundary_tags):
            if tag != "O":
                continue
            fd = space.face_data(b)
            mid = space.mesh.vertices[space.mesh.boundary_edges[b]].mean(axis=0)
            # outward from the fluid = towards the obstacle center
            assert fd.normal @ (center - mid) > 0
