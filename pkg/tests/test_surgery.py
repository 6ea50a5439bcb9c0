import numpy as np
import pytest

from ouro import model as M
from ouro import surgery as S
from ouro import tensor as T
from ouro.errors import ConfigError

CFG7 = M.ModelConfig(n_layers=7, d_model=16, n_heads=2, n_kv_heads=1,
                     d_ffn=32, vocab=11, max_seq=8)


def gram_tail_energy(mat: np.ndarray, r: int) -> float:
    """Oracle: sqrt of the eigenvalue mass of M^T M beyond the top r."""
    evals = np.linalg.eigvalsh(mat.T @ mat)[::-1]
    return float(np.sqrt(max(evals[r:].sum(), 0.0)))


class TestSplitSpec:
    def test_toy_split_removed_set(self):
        spec = S.toy_split(8)
        assert spec.recurrent == 4
        assert spec.removed == (2, 3, 5)
        assert spec.retained == 5
        assert spec.prelude + spec.coda + 1 + len(spec.removed) == 8

    def test_no_middle_rejected(self):
        with pytest.raises(ConfigError):
            S.SplitSpec(n_layers=8, prelude=4, recurrent=4, coda=4)

    def test_recurrent_inside_prelude_rejected(self):
        with pytest.raises(ConfigError):
            S.SplitSpec(n_layers=8, prelude=2, recurrent=1, coda=2)

    def test_recurrent_inside_coda_rejected(self):
        with pytest.raises(ConfigError):
            S.SplitSpec(n_layers=8, prelude=2, recurrent=6, coda=2)


class TestAverageResidual:
    def _model_with_middle(self, middles):
        m = M.init_base_model(CFG7, seed=0, dtype=T.F64)
        spec = S.toy_split(7)
        for idx, w in middles.items():
            m.layers[idx].q.data[:] = w
        return m, spec

    def test_identical_layers_zero(self):
        m = M.init_base_model(CFG7, seed=0, dtype=T.F64)
        spec = S.toy_split(7)
        for idx in spec.removed:
            for key, t in m.layers[idx].named().items():
                t.data[:] = getattr(m.layers[spec.recurrent], key).data
        out = S.average_residual(m.layers, spec, "q")
        assert np.all(out == 0.0)

    def test_opposite_residuals_cancel(self):
        m = M.init_base_model(CFG7, seed=1, dtype=T.F64)
        spec = S.toy_split(7)
        anchor = m.layers[spec.recurrent].q.data
        delta = np.random.default_rng(0).standard_normal(anchor.shape)
        a, b = spec.removed
        m.layers[a].q.data[:] = anchor + delta
        m.layers[b].q.data[:] = anchor - delta
        out = S.average_residual(m.layers, spec, "q")
        assert np.allclose(out, 0.0, atol=1e-12)

    def test_hand_forced_average(self):
        m = M.init_base_model(CFG7, seed=2, dtype=T.F64)
        spec = S.toy_split(7)
        anchor = m.layers[spec.recurrent].q.data
        r1 = np.zeros_like(anchor)
        r2 = np.zeros_like(anchor)
        r1[0, 0] = 2.0
        r2[1, 1] = 4.0
        a, b = spec.removed
        m.layers[a].q.data[:] = anchor + r1
        m.layers[b].q.data[:] = anchor + r2
        out = S.average_residual(m.layers, spec, "q")
        want = (r1 + r2) / 2.0
        assert np.allclose(out, want, atol=1e-12)

    def test_empty_removed_rejected(self):
        m = M.init_base_model(M.ModelConfig(n_layers=3, d_model=16, n_heads=2,
                                            n_kv_heads=1, d_ffn=32, vocab=11, max_seq=8),
                              seed=0)
        spec = S.SplitSpec(n_layers=3, prelude=1, recurrent=1, coda=1)
        with pytest.raises(ConfigError):
            S.average_residual(m.layers, spec, "q")


class TestJacobiEigensolver:
    def test_matches_library_on_random_symmetric(self):
        rng = np.random.default_rng(3)
        for n in (3, 8, 12):
            x = rng.standard_normal((n, n))
            sym = (x + x.T) / 2.0
            evals, evecs = S._jacobi_eigh(sym)
            assert np.allclose(np.sort(evals), np.linalg.eigvalsh(sym), atol=1e-10)
            assert np.allclose(sym @ evecs, evecs * evals[None, :], atol=1e-9)
            assert np.allclose(evecs.T @ evecs, np.eye(n), atol=1e-10)

    def test_zero_matrix_immediate(self):
        evals, evecs = S._jacobi_eigh(np.zeros((5, 5)))
        assert np.all(evals == 0.0)
        assert np.array_equal(evecs, np.eye(5))


class TestTruncatedSvd:
    def test_diagonal_forced(self):
        u, s, v = S.truncated_svd(np.diag([2.0, 1.0]), 1)
        assert np.allclose(s, [2.0], atol=1e-12)
        recon = (u * s[None, :]) @ v.T
        assert np.allclose(recon, [[2.0, 0.0], [0.0, 0.0]], atol=1e-12)

    def test_zero_matrix(self):
        u, s, v = S.truncated_svd(np.zeros((4, 3)), 2)
        assert np.all(s == 0.0)
        assert np.allclose((u * s[None, :]) @ v.T, 0.0)
        assert np.allclose(u.T @ u, np.eye(2), atol=1e-12)
        assert np.allclose(v.T @ v, np.eye(2), atol=1e-12)

    def test_tail_energy_matches_gram_oracle(self):
        rng = np.random.default_rng(4)
        mat = rng.standard_normal((8, 6))
        u, s, v = S.truncated_svd(mat, 3)
        err = np.linalg.norm(mat - (u * s[None, :]) @ v.T)
        assert abs(err - gram_tail_energy(mat, 3)) < 1e-8

    def test_wide_matrix_branch(self):
        rng = np.random.default_rng(5)
        mat = rng.standard_normal((4, 7))
        u, s, v = S.truncated_svd(mat, 2)
        err = np.linalg.norm(mat - (u * s[None, :]) @ v.T)
        assert abs(err - gram_tail_energy(mat, 2)) < 1e-8
        assert np.allclose(u.T @ u, np.eye(2), atol=1e-10)
        assert np.allclose(v.T @ v, np.eye(2), atol=1e-10)

    def test_full_rank_reconstructs(self):
        rng = np.random.default_rng(6)
        mat = rng.standard_normal((4, 4))
        u, s, v = S.truncated_svd(mat, 4)
        assert np.allclose((u * s[None, :]) @ v.T, mat, atol=1e-6)

    def test_singular_values_descending_nonnegative(self):
        rng = np.random.default_rng(7)
        u, s, v = S.truncated_svd(rng.standard_normal((9, 5)), 5)
        assert np.all(s >= 0.0)
        assert np.all(np.diff(s) <= 1e-12)

    def test_rank_deficient_input_keeps_factors_orthonormal(self):
        rng = np.random.default_rng(8)
        mat = np.outer(rng.standard_normal(6), rng.standard_normal(4))
        u, s, v = S.truncated_svd(mat, 3)
        assert s[0] > 0 and np.allclose(s[1:], 0.0, atol=1e-10)
        assert np.allclose(u.T @ u, np.eye(3), atol=1e-9)
        assert np.allclose(v.T @ v, np.eye(3), atol=1e-9)
        err = np.linalg.norm(mat - (u * s[None, :]) @ v.T)
        assert err < 1e-8

    def test_sign_canonical_and_deterministic(self):
        rng = np.random.default_rng(9)
        mat = rng.standard_normal((7, 5))
        u1, s1, v1 = S.truncated_svd(mat, 3)
        u2, s2, v2 = S.truncated_svd(mat.copy(), 3)
        assert np.array_equal(u1, u2) and np.array_equal(s1, s2) and np.array_equal(v1, v2)
        for j in range(3):
            nz = np.nonzero(np.abs(v1[:, j]) > 1e-12)[0]
            assert v1[nz[0], j] > 0

    def test_rank_out_of_range(self):
        with pytest.raises(ConfigError):
            S.truncated_svd(np.eye(4), 0)
        with pytest.raises(ConfigError):
            S.truncated_svd(np.eye(4), 5)

    def test_beats_random_competitors(self):
        rng = np.random.default_rng(10)
        mat = rng.standard_normal((10, 8))
        r = 2
        u, s, v = S.truncated_svd(mat, r)
        best = np.linalg.norm(mat - (u * s[None, :]) @ v.T)
        for _ in range(50):
            x = rng.standard_normal((10, r)) @ rng.standard_normal((r, 8))
            # Scale the competitor optimally so the comparison is not a strawman.
            denom = (x * x).sum()
            if denom > 0:
                x = x * ((mat * x).sum() / denom)
            assert best <= np.linalg.norm(mat - x) + 1e-12


class TestBuildBases:
    def test_identical_layers_give_zero_bases(self):
        m = M.init_base_model(CFG7, seed=10, dtype=T.F64)
        spec = S.toy_split(7)
        for idx in spec.removed:
            for key, t in m.layers[idx].named().items():
                t.data[:] = getattr(m.layers[spec.recurrent], key).data
        bases = S.build_bases(m, spec, rank=4, alpha=16.0)
        for target, basis in bases.bases.items():
            assert np.allclose(basis.B.data, 0.0), target
            assert np.allclose(basis.B.data @ basis.A.data, 0.0), target
            assert basis.tail_energy == 0.0

    def test_scaling_constant(self):
        m = M.init_base_model(CFG7, seed=11, dtype=T.F64)
        bases = S.build_bases(m, S.toy_split(7), rank=4, alpha=16.0)
        assert bases.scaling == 4.0
        assert S.LoraBasisSet(rank=32, alpha=16.0, bases={}).scaling == 0.5

    def test_factor_geometry(self):
        m = M.init_base_model(CFG7, seed=12, dtype=T.F64)
        spec = S.toy_split(7)
        bases = S.build_bases(m, spec, rank=4, alpha=16.0)
        for target, basis in bases.bases.items():
            a = basis.A.data
            b = basis.B.data
            assert np.allclose(a @ a.T, np.eye(4), atol=1e-8), target
            gram = b.T @ b
            norms = np.sqrt(np.diag(gram))
            assert np.allclose(gram - np.diag(norms ** 2), 0.0, atol=1e-8), target
            assert np.all(np.diff(norms) <= 1e-10), target
            resid = S.average_residual(m.layers, spec, target)
            err = np.linalg.norm(resid - b @ a)
            assert abs(err - gram_tail_energy(resid, 4)) < 1e-8, target

    def test_frozen_flags(self):
        m = M.init_base_model(CFG7, seed=13, dtype=T.F64)
        bases = S.build_bases(m, S.toy_split(7), rank=4, alpha=16.0)
        for name, t in bases.named_tensors().items():
            assert not t.requires_grad, name


class TestRunSurgery:
    def test_clones_do_not_alias_base(self):
        m = M.init_base_model(CFG7, seed=14, dtype=T.F64)
        spec = S.toy_split(7)
        result = S.run_surgery(m, spec, rank=4, alpha=16.0)
        before = m.layers[0].q.data.copy()
        result.prelude[0].q.data[:] += 1.0
        assert np.array_equal(m.layers[0].q.data, before)

    def test_all_parts_frozen_and_named(self):
        m = M.init_base_model(CFG7, seed=15, dtype=T.F64)
        result = S.run_surgery(m, S.toy_split(7), rank=4, alpha=16.0)
        named = result.frozen_tensors()
        assert "prelude.0.q" in named and "recurrent.down" in named and "coda.1.o" in named
        assert "lora.q.A" in named and "lora.down.B" in named
        for name, t in named.items():
            assert not t.requires_grad, name
            assert t.name == name

    def test_layer_count_mismatch_rejected(self):
        m = M.init_base_model(CFG7, seed=16)
        with pytest.raises(ConfigError):
            S.run_surgery(m, S.toy_split(8), rank=4, alpha=16.0)

    def test_manifest_mentions_every_target(self):
        m = M.init_base_model(CFG7, seed=17, dtype=T.F64)
        result = S.run_surgery(m, S.toy_split(7), rank=4, alpha=16.0)
        text = S.manifest_text(result)
        for target in M.ADAPT_TARGETS:
            assert f"target={target}" in text
        assert "rank=4" in text and "removed=[2, 4]" in text
