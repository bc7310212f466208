import math

import numpy as np
import pytest

from grank.data import PAD
from grank.errors import DimensionError, IntegrityError, MaskError
from grank.numeric import Parameter, grad_check, precision
from grank.numeric.tensor import constant
from grank.ranker import Ranker, RankerConfig, loss_ca_info


def ranker_and_table(seed=0, d=8, n_items=40, long_len=10):
    rng = np.random.default_rng(seed)
    ranker = Ranker(RankerConfig(long_len=long_len, d=d), rng)
    table = Parameter(rng.standard_normal((n_items, d)) * 0.5, name="table")
    return ranker, table


def test_encoding_rows_match_direct_mlp():
    ranker, table = ranker_and_table()
    enc = ranker.encode_long_history(np.array([3, 9, 4]), table)
    assert enc.valid.sum() == 3 and enc.valid[0, -3:].all()
    want = ranker.long_mlp(constant(table.data[[3, 9, 4]])).data
    np.testing.assert_allclose(enc.h_long.data[0, -3:], want, rtol=1e-6)


def test_truncates_to_latest():
    ranker, table = ranker_and_table(long_len=4)
    enc = ranker.encode_long_history(np.arange(10), table)
    assert enc.valid.all()
    want = ranker.long_mlp(constant(table.data[6:10])).data
    np.testing.assert_allclose(enc.h_long.data[0], want, rtol=1e-6)


def test_unknown_id():
    ranker, table = ranker_and_table()
    with pytest.raises(IntegrityError):
        ranker.encode_long_history(np.array([1, 400]), table)


def test_single_row_gives_its_value():
    ranker, table = ranker_and_table()
    enc = ranker.encode_long_history(np.array([5]), table)
    v = enc.values.data[0, -1]
    got = ranker.cross_attention_score(table.data[2], enc)
    want = ranker.ca_head(constant(v[None])).data.reshape(-1)[0]
    assert got == pytest.approx(float(want), rel=1e-5)


def test_duplicates_match_single_row():
    ranker, table = ranker_and_table()
    one = ranker.encode_long_history(np.array([5]), table)
    many = ranker.encode_long_history(np.array([5, 5, 5, 5]), table)
    for c in range(6):
        assert ranker.cross_attention_score(table.data[c], many) == pytest.approx(
            ranker.cross_attention_score(table.data[c], one), rel=1e-5
        )


def test_padding_invariance():
    ranker, table = ranker_and_table(long_len=12)
    hist = np.array([4, 8, 15, 16])
    short = ranker.encode_long_history(hist, table, long_len=4)
    padded = ranker.encode_long_history(hist, table, long_len=12)
    cands = constant(table.data[:10])
    np.testing.assert_allclose(ranker.batch_score(cands, short).data, ranker.batch_score(cands, padded).data, atol=1e-6)


def test_no_valid_rows():
    ranker, table = ranker_and_table()
    enc = ranker.encode_long_history(np.full(3, PAD), table)
    with pytest.raises(MaskError):
        ranker.batch_score(constant(table.data[:2]), enc)
    with pytest.raises(MaskError):
        ranker.cross_attention_score(table.data[0], enc)


@pytest.mark.parametrize("seed", range(3))
def test_batch_equals_scalar_path(seed):
    rng = np.random.default_rng(seed)
    ranker, table = ranker_and_table(seed, d=16, n_items=3000, long_len=50)
    enc = ranker.encode_long_history(rng.integers(0, 3000, 37), table)
    cand = rng.integers(0, 3000, 2000)
    batch = ranker.batch_score(constant(table.data[cand]), enc).data[0]
    for j in rng.choice(2000, 60, replace=False):
        assert batch[j] == pytest.approx(ranker.cross_attention_score(table.data[cand[j]], enc), abs=1e-6)
    assert ranker.batch_score(constant(table.data[cand[:1]]), enc).data[0, 0] == pytest.approx(
        ranker.cross_attention_score(table.data[cand[0]], enc), abs=1e-6
    )


def test_permutation_equivariance():
    ranker, table = ranker_and_table()
    enc = ranker.encode_long_history(np.array([1, 2, 3, 7]), table)
    cands = table.data[:12]
    perm = np.random.default_rng(0).permutation(12)
    a = ranker.batch_score(constant(cands), enc).data[0]
    b = ranker.batch_score(constant(cands[perm]), enc).data[0]
    np.testing.assert_array_equal(a[perm], b)


def test_key_width_mismatch():
    ranker, table = ranker_and_table()
    enc = ranker.encode_long_history(np.array([1, 2]), table)
    with pytest.raises(DimensionError):
        ranker.score_queries(constant(np.zeros((2, 5))), enc)


def test_empty_candidate_list():
    ranker, table = ranker_and_table()
    enc = ranker.encode_long_history(np.array([1]), table)
    with pytest.raises(ValueError):
        ranker.batch_score(constant(np.zeros((0, 8))), enc)


def test_loss_cases():
    assert loss_ca_info(constant(np.zeros((16, 16))), np.arange(16)).item() == pytest.approx(math.log(16))
    assert loss_ca_info(constant(np.array([[1.0, 0.0, 0.0]])), [0]).item() == pytest.approx(0.5514, abs=1e-4)
    assert loss_ca_info(constant(np.array([[80.0, 0.0]])), [0]).item() < 1e-20


def test_ca_loss_finite_difference():
    with precision("64"):
        rng = np.random.default_rng(4)
        ranker = Ranker(RankerConfig(long_len=6, d=6), rng)
        table = Parameter(rng.standard_normal((20, 6)), name="table")
        long_items = np.array([[PAD, 1, 2, 3, 4, 5], [6, 7, 8, 9, 10, 11], [PAD, PAD, PAD, 12, 13, 14]])
        targets = np.array([3, 9, 19])

        def loss():
            from grank.numeric import ops

            enc = ranker.encode_long_history(long_items, table)
            return loss_ca_info(ranker.batch_score(ops.take(table, targets), enc), np.arange(3))

        report = grad_check(loss, [table, *ranker.parameters()])
        assert report.passed(1e-4), report.max_error
