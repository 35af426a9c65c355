import numpy as np
import pytest

from unrollspace import unrollnet
from unrollspace.numerics import spectral_sq_norm
from unrollspace.solvers import ista
from unrollspace.synthgen import make_dataset, sample_dictionary
from unrollspace.trainer import grad_check
from unrollspace.unrollnet import (
    LWA,
    MM,
    NA,
    all_skip_pairs,
    backward,
    count_extra,
    design_space_size,
    forward,
    genome_dense,
    genome_from_json,
    genome_hash,
    genome_lfista,
    genome_lista,
    genome_to_json,
    init_params,
    make_genome,
    mse_loss,
    read_params,
    validate_genome,
    write_params,
)

BG = {"kind": "bernoulli_gauss", "p": 0.1}
NONE = {"kind": "none"}


def _problem(m=32, n=64, count=8, seed=42):
    D = sample_dictionary(m, n, seed)
    ds = make_dataset(D, count, BG, NONE, seed + 1)
    return D, ds


class TestPresetsAndCombinatorics:
    def test_extra_connection_counts(self):
        assert count_extra(genome_lista(16)) == 0
        assert count_extra(genome_lfista(16)) == 14
        assert count_extra(genome_dense(16)) == 105

    def test_small_k(self):
        assert count_extra(genome_lista(3)) == 0
        assert count_extra(genome_dense(3)) == 1
        assert len(all_skip_pairs(4)) == 3

    def test_k_below_two_rejected(self):
        for builder in (genome_lista, genome_lfista, genome_dense):
            with pytest.raises(ValueError):
                builder(1)

    def test_design_space_sizes(self):
        assert design_space_size(16, False, False) == 2 ** 105
        with_neurons = design_space_size(16, True, False)
        assert abs(with_neurons - 1.75e39) / 1.75e39 < 0.01
        assert design_space_size(16, False, True) == 2 ** 120

    def test_lfista_pattern(self):
        g = genome_lfista(6)
        assert g.skip_gates == frozenset({(1, 3), (2, 4), (3, 5), (4, 6)})


class TestValidateGenome:
    def test_dense_ok(self):
        assert validate_genome(genome_dense(16)) == []

    def test_non_causal(self):
        g = make_genome(5, skips=[(4, 2)])
        assert any("non-causal" in v for v in validate_genome(g))

    def test_first_side_gate_always_on(self):
        g = make_genome(5, side_gates=(False, True, True, True, True))
        assert any("layer 1" in v for v in validate_genome(g))

    def test_default_duplicate_flagged(self):
        g = make_genome(5, skips=[(3, 4)])
        assert any("default" in v for v in validate_genome(g))

    def test_violations_returned_not_raised(self):
        g = make_genome(5, skips=[(4, 2)])
        validate_genome(g)  # must not raise


class TestInitEquivalence:
    def test_lista_matches_ista_iterates(self):
        D, ds = _problem()
        lam = 0.4
        g = genome_lista(8)
        p = init_params(g, D, lam)
        L = spectral_sq_norm(D.data)
        net = forward(g, p, ds.b)
        ref = ista(D.data, ds.b, lam, 8, L=L)
        for a, b in zip(net.layer_outputs, ref.iterates[1:]):
            assert np.max(np.abs(a - b)) <= 1e-12

    def test_mm_any_gates_matches_ista(self):
        D, ds = _problem()
        g = make_genome(8, MM, skips=[(1, 3), (2, 6), (4, 8), (1, 8)])
        p = init_params(g, D, 0.4)
        net = forward(g, p, ds.b)
        ref = ista(D.data, ds.b, 0.4, 8, L=spectral_sq_norm(D.data))
        for a, b in zip(net.layer_outputs, ref.iterates[1:]):
            assert np.max(np.abs(a - b)) <= 1e-12

    def test_lwa_extra_gates_start_inert(self):
        D, ds = _problem()
        g = make_genome(8, LWA, skips=[(1, 4), (2, 7)])
        p = init_params(g, D, 0.4)
        plain = forward(genome_lista(8), init_params(genome_lista(8), D, 0.4), ds.b)
        net = forward(g, p, ds.b)
        np.testing.assert_array_equal(net.layer_outputs[-1], plain.layer_outputs[-1])

    def test_theta_initialized_to_lam_over_L(self):
        D, _ = _problem()
        p = init_params(genome_lista(8), D, 0.4)
        L = spectral_sq_norm(D.data)
        np.testing.assert_allclose(p.theta, 0.4 / L)

    def test_parameter_count_lwa(self):
        D, _ = _problem()
        g = make_genome(8, LWA, skips=[(1, 3), (2, 5), (3, 6)])
        p = init_params(g, D, 0.4)
        base = init_params(genome_lista(8), D, 0.4)
        extra = sum(a.size for _, a in p.named_arrays()) - sum(
            a.size for _, a in base.named_arrays()
        )
        assert extra == count_extra(g)
        assert base.conn_coef.size == 8  # one coefficient per default path


class TestForward:
    def test_na_single_input_equals_lista(self):
        D, ds = _problem()
        g_na = make_genome(6, NA)
        g_li = genome_lista(6)
        out_na = forward(g_na, init_params(g_na, D, 0.4), ds.b)
        out_li = forward(g_li, init_params(g_li, D, 0.4), ds.b)
        np.testing.assert_array_equal(out_na.layer_outputs[-1], out_li.layer_outputs[-1])

    def test_gate_off_equals_absence(self):
        # a zero-coefficient connection behaves exactly like a missing gate
        D, ds = _problem()
        g_with = make_genome(6, LWA, skips=[(2, 5)])
        g_without = genome_lista(6)
        p_with = init_params(g_with, D, 0.4)
        p_without = init_params(g_without, D, 0.4)
        idx = g_with.conn_pairs().index((2, 5))
        p_with.conn_coef[idx] = 0.0
        a = forward(g_with, p_with, ds.b).layer_outputs[-1]
        b = forward(g_without, p_without, ds.b).layer_outputs[-1]
        np.testing.assert_array_equal(a, b)

    def test_batch_permutation_equivariance(self):
        D, ds = _problem(count=16)
        g = genome_dense(5)
        p = init_params(g, D, 0.4)
        rng = np.random.default_rng(0)
        p.conn_coef += 0.1 * rng.standard_normal(p.conn_coef.shape)
        perm = rng.permutation(16)
        out = forward(g, p, ds.b).layer_outputs[-1]
        out_perm = forward(g, p, ds.b[:, perm]).layer_outputs[-1]
        np.testing.assert_array_equal(out[:, perm], out_perm)

    def test_depth_truncation(self):
        D, ds = _problem()
        g = genome_lista(8)
        p = init_params(g, D, 0.4)
        full = forward(g, p, ds.b)
        short = forward(g, p, ds.b, depth=3)
        assert len(short.layer_outputs) == 3
        np.testing.assert_array_equal(short.layer_outputs[-1], full.layer_outputs[2])

    def test_side_gate_off_drops_default(self):
        D, ds = _problem()
        side = (True, True, True, False, True, True)
        g = make_genome(6, LWA, skips=[(2, 4)], side_gates=side)
        p = init_params(g, D, 0.4)
        # layer 4 fuses only x^(2); setting that coefficient to zero makes the
        # layer see a zero fused input
        idx = g.conn_pairs().index((2, 4))
        p.conn_coef[idx] = 0.0
        out = forward(g, p, ds.b)
        u4 = out.pre_activations[3]
        np.testing.assert_array_equal(u4, p.w_b @ ds.b)

    def test_nonfinite_reported_with_layer(self):
        D, ds = _problem()
        g = genome_lista(4)
        p = init_params(g, D, 0.4)
        p.w_x *= 1e200
        p.alpha[:] = 1e200
        with np.errstate(over="ignore"), pytest.raises(ArithmeticError, match="layer"):
            forward(g, p, ds.b)

    def test_shape_mismatch(self):
        D, ds = _problem()
        g = genome_lista(4)
        p = init_params(g, D, 0.4)
        with pytest.raises(ValueError):
            forward(g, p, ds.b[:-1])


class TestBackward:
    def test_zero_input_zero_grad(self):
        D, _ = _problem()
        g = genome_lista(4)
        p = init_params(g, D, 0.4)
        b = np.zeros((D.m, 5))
        x_star = np.zeros((D.n, 5))
        grads = backward(g, p, b, x_star)
        assert np.all(grads["w_b"] == 0.0)

    def test_batch_duplication_invariance(self):
        D, ds = _problem(count=6)
        g = make_genome(5, LWA, skips=[(1, 4)])
        p = init_params(g, D, 0.4)
        doubled_b = np.concatenate([ds.b, ds.b], axis=1)
        doubled_x = np.concatenate([ds.x_true, ds.x_true], axis=1)
        g1 = backward(g, p, ds.b, ds.x_true)
        g2 = backward(g, p, doubled_b, doubled_x)
        for name in g1:
            np.testing.assert_allclose(g1[name], g2[name], rtol=1e-12, atol=1e-15)

    @pytest.mark.parametrize("fusion", [LWA, NA, MM])
    @pytest.mark.parametrize("neuron", ["soft_threshold", "relu", "leaky_relu"])
    def test_matches_finite_differences(self, fusion, neuron):
        D = sample_dictionary(4, 8, seed=77)
        g = make_genome(3, fusion, skips=[(1, 3)], neurons=(neuron,) * 3)
        err = grad_check(g, D, seed=3)
        assert err <= 1e-5

    def test_mixed_neurons(self):
        D = sample_dictionary(4, 8, seed=78)
        g = make_genome(3, NA, skips=[(1, 3)],
                        neurons=("relu", "soft_threshold", "leaky_relu"))
        assert grad_check(g, D, seed=4) <= 1e-5

    def test_pruned_side_gates_gradcheck(self):
        D = sample_dictionary(4, 8, seed=79)
        g = make_genome(4, LWA, skips=[(1, 3), (2, 4)],
                        side_gates=(True, True, False, True))
        assert grad_check(g, D, seed=5) <= 1e-5


class TestGenomeSerialization:
    def test_json_round_trip(self):
        g = make_genome(7, MM, skips=[(1, 3), (4, 7)],
                        side_gates=(True, False, True, True, False, True, True),
                        neurons=("relu",) * 7)
        back = genome_from_json(genome_to_json(g))
        assert back == g
        assert genome_hash(back) == genome_hash(g)

    def test_hash_is_order_insensitive(self):
        a = make_genome(6, skips=[(1, 4), (2, 5)])
        b = make_genome(6, skips=[(2, 5), (1, 4)])
        assert genome_hash(a) == genome_hash(b)

    def test_params_blob_round_trip(self, tmp_path):
        D, _ = _problem()
        g = make_genome(5, MM, skips=[(1, 4), (2, 5)])
        p = init_params(g, D, 0.4)
        path = tmp_path / "p.usrp"
        write_params(path, g, p)
        g2, p2 = read_params(path)
        assert g2 == g
        for (n1, a1), (n2, a2) in zip(p.named_arrays(), p2.named_arrays()):
            assert n1 == n2
            np.testing.assert_array_equal(a1, a2)


class TestLoss:
    def test_mse_loss_is_columnwise_mean(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((6, 4))
        y = rng.standard_normal((6, 4))
        per_col = [np.sum((x[:, j] - y[:, j]) ** 2) for j in range(4)]
        assert mse_loss(x, y) == pytest.approx(np.mean(per_col))
