import math

import numpy as np
import pytest

from conftest import tiny_config
from grank.attention import AttentionMask, combined_mask, decomposed_attention, full_attention_oracle
from grank.data import PAD, UserRecord, interaction_features
from grank.errors import ContractError, DimensionError, IntegrityError
from grank.generator import CandidateBatch, loss_ntp, loss_sa_info
from grank.model import GRankModel
from grank.numeric import Parameter, grad_check, ops, precision
from grank.numeric.tensor import constant


def random_mask(rng, U, T):
    valid = np.ones((U, T), dtype=bool)
    for u in range(U):
        valid[u, : int(rng.integers(0, T))] = False  # left padding; the query token stays valid
    return AttentionMask.causal(valid)


def attention_case(rng, U, T, B, d):
    x = rng.standard_normal((U, T, d))
    c = rng.standard_normal((U, B, d)) if B else None
    w = [rng.standard_normal((d, d)) / math.sqrt(d) for _ in range(3)]
    return x, c, w, random_mask(rng, U, T)


class TestDecomposedAttention:
    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("L,B,d", [(2, 1, 4), (8, 16, 32), (64, 300, 32), (8, 1, 128)])
    def test_matches_oracle_64(self, seed, L, B, d):
        rng = np.random.default_rng(seed)
        with precision("64"):
            x, c, w, mask = attention_case(rng, 2, L + 1, B, d)
            o_x, o_c = decomposed_attention(constant(x), constant(c), *map(constant, w), mask)
            r_x, r_c = full_attention_oracle(x, c, *w, mask)
            assert np.max(np.abs(o_x.data - r_x)) <= 1e-10
            assert np.max(np.abs(o_c.data - r_c)) <= 1e-10

    def test_matches_oracle_32(self):
        rng = np.random.default_rng(9)
        x, c, w, mask = attention_case(rng, 2, 65, 300, 128)
        args = [constant(a.astype(np.float32)) for a in (x, c, *w)]
        o_x, o_c = decomposed_attention(*args[:2], *args[2:], mask)
        r_x, r_c = full_attention_oracle(x, c, *w, mask)
        assert np.max(np.abs(o_x.data - r_x)) <= 1e-5
        assert np.max(np.abs(o_c.data - r_c)) <= 1e-5

    def test_no_candidates_is_plain_self_attention(self):
        rng = np.random.default_rng(1)
        with precision("64"):
            x, _, w, mask = attention_case(rng, 1, 5, 0, 4)
            o_x, o_c = decomposed_attention(constant(x), None, *map(constant, w), mask)
            assert o_c is None
            q, k, v = (x[0] @ wi for wi in w)
            s = q @ k.T / 2.0
            s[~mask.allowed[0]] = -np.inf
            a = np.exp(s - s.max(axis=1, keepdims=True))
            a /= a.sum(axis=1, keepdims=True)
            np.testing.assert_allclose(o_x.data[0], a @ v, atol=1e-12)

    def test_hand_case(self):
        with precision("64"):
            eye = np.eye(2)
            x = np.array([[1.0, 0.0], [0.0, 1.0]])
            c = np.array([[1.0, 1.0]])
            mask = AttentionMask.causal(np.ones(2, dtype=bool))
            _, o_c = decomposed_attention(constant(x), constant(c), *[constant(eye)] * 3, mask)
            # logits over [x1, x2, self] are [1, 1, 2] / sqrt(2)
            w = np.exp(np.array([1.0, 1.0, 2.0]) / math.sqrt(2))
            w /= w.sum()
            want = w[0] * x[0] + w[1] * x[1] + w[2] * c[0]
            np.testing.assert_allclose(o_c.data, want[None], atol=1e-12)

    def test_candidates_isolated(self):
        rng = np.random.default_rng(2)
        with precision("64"):
            x, c, w, mask = attention_case(rng, 1, 6, 4, 8)
            ws = list(map(constant, w))
            _, base = decomposed_attention(constant(x), constant(c), *ws, mask)
            c2 = c.copy()
            c2[0, 2] += 5.0
            o_x2, moved = decomposed_attention(constant(x), constant(c2), *ws, mask)
            keep = [0, 1, 3]
            np.testing.assert_array_equal(moved.data[0, keep], base.data[0, keep])
            assert not np.allclose(moved.data[0, 2], base.data[0, 2])

    def test_combined_mask_shape(self):
        mask = AttentionMask.causal(np.array([False, True, True]))
        full = combined_mask(mask, 2)
        assert full.shape == (5, 5)
        assert not full[3, 4] and full[3, 3] and not full[3, 0] and full[3, 1]
        assert not full[:3, 3:].any()

    def test_width_mismatch(self):
        mask = AttentionMask.causal(np.ones(3, dtype=bool))
        x = constant(np.zeros((3, 4)))
        with pytest.raises(DimensionError):
            decomposed_attention(x, constant(np.zeros((1, 5))), *[constant(np.eye(4))] * 3, mask)

    def test_multi_head_matches_oracle(self):
        rng = np.random.default_rng(3)
        with precision("64"):
            x, c, w, mask = attention_case(rng, 2, 9, 5, 8)
            o_x, o_c = decomposed_attention(constant(x), constant(c), *map(constant, w), mask, heads=2)
            r_x, r_c = full_attention_oracle(x, c, *w, mask, heads=2)
            assert np.max(np.abs(o_x.data - r_x)) <= 1e-10
            assert np.max(np.abs(o_c.data - r_c)) <= 1e-10


def model_for(data, seed=0, **overrides):
    train, _ = data
    cfg = tiny_config(**overrides)
    return GRankModel(cfg, train.n_items, train.demographics_width, seed=seed)


class TestGenerator:
    def test_leakage_h_u_bitwise_identical(self, tiny_data):
        model = model_for(tiny_data)
        col = model.collate(tiny_data[0].users[:8])
        table = model.item_embedding
        alone = model.generator(col, table, None, training=True)
        joined = model.generator(col, table, CandidateBatch.from_targets(col.targets), training=True)
        np.testing.assert_array_equal(alone.h_u.data, joined.h_u.data)
        np.testing.assert_array_equal(alone.x_out.data, joined.x_out.data)

    def test_perturbing_a_candidate_moves_only_its_output(self, tiny_data):
        model = model_for(tiny_data)
        col = model.collate(tiny_data[0].users[:4])
        table = model.item_embedding
        items = np.array([3, 7, 11])
        base = model.generator(col, table, CandidateBatch(items))
        other = model.generator(col, table, CandidateBatch(np.array([3, 19, 11])))
        np.testing.assert_array_equal(base.h_u.data, other.h_u.data)
        np.testing.assert_array_equal(base.h_c.data[:, [0, 2]], other.h_c.data[:, [0, 2]])

    def test_inference_rejects_candidates(self, tiny_data):
        model = model_for(tiny_data)
        col = model.collate(tiny_data[0].users[:2])
        with pytest.raises(ContractError):
            model.generator(col, model.item_embedding, CandidateBatch([1]), training=False)

    def test_causality(self, tiny_data):
        model = model_for(tiny_data)
        col = model.collate(tiny_data[0].users[:3])
        table = model.item_embedding
        x = model.generator.encode_interactions(col.short_items, col.short_features, table)
        u = model.generator.build_query_token(col, table)
        base = model.generator.decode(x, u, None, col.short_valid).x_out.data
        t = 3
        xp = x.data.copy()
        xp[:, t] += 1.0
        moved = model.generator.decode(constant(xp), u, None, col.short_valid).x_out.data
        np.testing.assert_array_equal(moved[:, :t], base[:, :t])
        assert not np.allclose(moved[:, -1], base[:, -1])

    def test_zero_layers_is_identity(self, tiny_data):
        model = model_for(tiny_data, **{"generator.N": 0})
        col = model.collate(tiny_data[0].users[:2])
        table = model.item_embedding
        u = model.generator.build_query_token(col, table)
        out = model.generator(col, table, None)
        np.testing.assert_array_equal(out.h_u.data, u.data)

    def test_user_vectors_unit_norm(self, tiny_data):
        model = model_for(tiny_data)
        v = model.user_vectors(tiny_data[1].users[:6])
        assert v.shape == (6, 8)
        np.testing.assert_allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(np.linalg.norm(model.item_vectors(), axis=1), 1.0, atol=1e-6)

    def test_single_interaction_row(self, tiny_data):
        model = model_for(tiny_data)
        g = model.generator
        items = np.full((1, 6), PAD)
        items[0, -1] = 5
        feats = np.zeros((1, 6, 4))
        feats[0, -1] = interaction_features(np.array([0.5]), np.array([1]))[0]
        x = g.encode_interactions(items, feats, model.item_embedding).data
        e = model.item_embedding.data[5]
        want = g.interaction_mlp(constant(np.concatenate([e, feats[0, -1]])[None])).data[0] + g.position.data[-1]
        np.testing.assert_allclose(x[0, -1], want, rtol=1e-6)
        np.testing.assert_array_equal(x[0, :-1], 0.0)

    def test_unknown_item_rejected(self, tiny_data):
        model = model_for(tiny_data)
        items = np.full((1, 6), 10_000)
        with pytest.raises(IntegrityError):
            model.generator.encode_interactions(items, np.zeros((1, 6, 4)), model.item_embedding)

    def test_cold_start_and_click_pool(self, tiny_data):
        model = model_for(tiny_data)
        width = tiny_data[0].demographics_width
        empty = UserRecord(0, [], [], [], [], target=9, target_timestamp=1, demographics=np.zeros(width))
        v = model.user_vectors([empty])
        assert np.all(np.isfinite(v))
        col = model.collate([empty])
        assert all(col.pool_ids[n][0].size == 0 for n in ("rs", "click", "long_view"))
        pooled = ops.embedding_bag(model.item_embedding, np.array([2, 4]), np.array([0, 0]), 1).data[0]
        np.testing.assert_allclose(pooled, model.item_embedding.data[2] + model.item_embedding.data[4], rtol=1e-6)


class TestLosses:
    def test_uniform_ntp_is_ln_b(self):
        sims = constant(np.zeros((16, 16)))
        items = constant(np.zeros((16, 4)))
        loss = loss_ntp(ops.as_tensor(np.zeros((16, 4))), items, np.arange(16), 0.05)
        assert loss.item() == pytest.approx(math.log(16))
        assert loss_sa_info(sims, np.arange(16)).item() == pytest.approx(math.log(16))

    def test_hand_case(self):
        h = constant(np.array([[1.0, 0.0]]))
        items = constant(np.array([[1.0, 0.0], [0.0, 1.0], [0.0, -0.0]]))
        assert loss_ntp(h, items, [0], tau=1.0).item() == pytest.approx(-math.log(math.e / (math.e + 2)), abs=1e-6)

    def test_dominant_positive(self):
        s = constant(np.array([[60.0, 0.0, 0.0]]))
        assert loss_sa_info(s, [0]).item() < 1e-20

    @pytest.mark.parametrize("weights", [(1, 0, 0), (0, 1, 0)])
    def test_finite_difference(self, tiny_data, weights):
        with precision("64"):
            model = model_for(tiny_data)
            model.cast(np.float64)
            col = model.collate(tiny_data[0].users[:6])
            report = grad_check(lambda: model.losses(col, weights).total, list(model.parameters()), max_entries=4, floor=1e-5)
            assert report.passed(1e-4), report.max_error

    def test_initial_sa_and_ca_losses_near_chance(self, tiny_data):
        model = model_for(tiny_data)
        col = model.collate(tiny_data[0].users[:16])
        losses = model.losses(col, (0, 1, 1))
        assert abs(losses.sa.item() - math.log(16)) < 0.2
        assert abs(losses.ca.item() - math.log(16)) < 0.2
        # tau=0.05 scales initial cosine noise by 20, so NTP starts well above chance
        assert model.losses(col, (1, 0, 0)).ntp.item() > math.log(16)
