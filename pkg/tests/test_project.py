import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from knotpair.errors import DataError
from knotpair.project import pca_fit, pca_project, scatter_svg, write_scatter


def jacobi_eigh(A, tol=1e-14, max_sweeps=100):
    """Cyclic Jacobi rotations; independent oracle for the symmetric eigenproblem."""
    A = np.array(A, dtype=np.float64)
    n = A.shape[0]
    V = np.eye(n)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(A, -1) ** 2))
        if off < tol * max(1.0, np.abs(A).max()):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if A[p, q] == 0.0:
                    continue
                theta = (A[q, q] - A[p, p]) / (2 * A[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1)) if theta != 0 else 1.0
                c = 1 / np.sqrt(t * t + 1)
                s = t * c
                J = np.eye(n)
                J[p, p] = J[q, q] = c
                J[p, q], J[q, p] = s, -s
                A = J.T @ A @ J
                V = V @ J
    return np.diag(A), V


class TestFit:
    def test_against_jacobi(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(60, 12)) @ rng.normal(size=(12, 12))
        model = pca_fit(X)
        Xc = X - X.mean(axis=0)
        evals, evecs = jacobi_eigh(Xc.T @ Xc / 59)
        order = np.argsort(evals)[::-1][:2]
        np.testing.assert_allclose(model.explained_variance, evals[order], rtol=1e-9)
        for k, idx in enumerate(order):
            v = evecs[:, idx]
            v = v if v[np.argmax(np.abs(v))] > 0 else -v
            np.testing.assert_allclose(model.components[k], v, atol=1e-9)

    def test_line_data(self):
        rng = np.random.default_rng(1)
        direction = rng.normal(size=128)
        X = rng.normal(size=(30, 1)) * direction + rng.normal(size=128)
        model = pca_fit(X)
        assert model.explained_variance[1] == pytest.approx(0.0, abs=1e-9)

    def test_planar_distances_preserved(self):
        rng = np.random.default_rng(2)
        Q, _ = np.linalg.qr(rng.normal(size=(128, 2)))
        coords = rng.normal(size=(40, 2)) * [3.0, 1.0]
        X = coords @ Q.T + rng.normal(size=128)
        Y = pca_project(pca_fit(X), X)
        for i in range(40):
            for j in range(i + 1, 40):
                assert np.linalg.norm(Y[i] - Y[j]) == pytest.approx(np.linalg.norm(X[i] - X[j]), abs=1e-6)

    def test_duplicated_rows(self):
        X = np.random.default_rng(3).normal(size=(20, 10))
        a, b = pca_fit(X), pca_fit(np.vstack([X, X]))
        np.testing.assert_allclose(a.components, b.components, atol=1e-9)

    def test_orthonormal_and_sign(self):
        model = pca_fit(np.random.default_rng(4).normal(size=(50, 128)))
        np.testing.assert_allclose(model.components @ model.components.T, np.eye(2), atol=1e-9)
        for row in model.components:
            assert row[np.argmax(np.abs(row))] > 0
        assert model.explained_variance[0] >= model.explained_variance[1]

    def test_errors(self):
        with pytest.raises(DataError):
            pca_fit(np.zeros((1, 4)))
        with pytest.raises(DataError):
            pca_fit(np.ones((5, 4)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_variance_properties(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(int(rng.integers(3, 30)), 8)) * rng.uniform(0.1, 5, 8)
        model = pca_fit(X)
        Y = pca_project(model, X)
        var = Y.var(axis=0, ddof=1)
        assert var[0] >= var[1] - 1e-12
        assert var.sum() <= X.var(axis=0, ddof=1).sum() + 1e-9
        perm = rng.permutation(len(X))
        np.testing.assert_allclose(pca_project(pca_fit(X[perm]), X[perm]), Y[perm], atol=1e-8)


class TestProject:
    def test_mean_maps_to_origin(self):
        X = np.random.default_rng(5).normal(size=(10, 6))
        model = pca_fit(X)
        np.testing.assert_allclose(pca_project(model, model.mean[None, :]), [[0.0, 0.0]], atol=1e-12)

    def test_affine(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(10, 6))
        model = pca_fit(X)
        a, b = rng.normal(size=(2, 6))
        lhs = pca_project(model, [a + b - model.mean])
        rhs = pca_project(model, [a]) + pca_project(model, [b])
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)
        assert pca_project(model, X).shape == (10, 2)


class TestOutputs:
    def test_scatter_csv(self, tmp_path):
        write_scatter(tmp_path / "s.csv", ["A", "B"], [0, 1], [3, 4], np.array([[0.5, -1.0], [2.0, 0.25]]))
        assert (tmp_path / "s.csv").read_text().splitlines() == [
            "specimen_id,knot_index,cluster_id,x,y", "A,0,3,0.5,-1.0", "B,1,4,2.0,0.25"
        ]

    def test_svg_well_formed(self):
        svg = scatter_svg(["A", "A", "B&C"], [0, 0, 1], np.array([[0, 0], [1, 1], [2, 0.5]]))
        root = ET.fromstring(svg)
        circles = root.findall("{http://www.w3.org/2000/svg}circle")
        assert len(circles) == 3
        assert circles[0].get("fill") == circles[1].get("fill")
