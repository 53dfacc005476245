import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from whilealive.data import (
    DuplicateEndRecordError,
    EventDataset,
    EventRecord,
    InconsistentClusterError,
    InconsistentCovariatesError,
    InvalidStatusError,
    MissingEndRecordError,
    NegativeTimeError,
    RecurrentAfterFollowUpError,
    SubjectData,
    WeightScheme,
    ZeroFollowUpError,
    cumulative_loss,
    ingest_long,
    read_csv,
    to_records,
    write_csv,
)


def rec(sid, t, s, z=(0.0,), c=None):
    return EventRecord(sid, t, s, z, c)


def test_event_then_death():
    d = ingest_long([rec("a", 0.5, 1), rec("a", 2.0, 2)])
    s = d.subject("a")
    assert (s.U, s.delta) == (2.0, 1)
    assert [list(x) for x in s.recurrent_times] == [[0.5]]
    assert s.terminal


def test_censor_only_subject():
    d = ingest_long([rec("a", 1.5, 0)], K=1)
    s = d.subject("a")
    assert (s.U, s.delta) == (1.5, 0)
    assert all(len(x) == 0 for x in s.recurrent_times)


def test_recurrent_after_followup():
    with pytest.raises(RecurrentAfterFollowUpError, match="recurrent time exceeds follow-up") as exc:
        ingest_long([rec("a", 1.0, 1), rec("a", 0.8, 0)], K=1)
    assert exc.value.subject_id == "a"


@pytest.mark.parametrize(
    "rows, err",
    [
        ([rec("a", 1.0, 0), rec("a", 2.0, 2)], DuplicateEndRecordError),
        ([rec("a", 1.0, 1)], MissingEndRecordError),
        ([rec("a", 0.5, 1, (0.0,)), rec("a", 1.0, 2, (1.0,))], InconsistentCovariatesError),
        ([rec("a", 0.5, 1, c="x"), rec("a", 1.0, 2, c="y")], InconsistentClusterError),
        ([rec("a", -1.0, 1), rec("a", 1.0, 2)], NegativeTimeError),
        ([rec("a", 0.0, 2)], ZeroFollowUpError),
        ([rec("a", 1.0, 5)], InvalidStatusError),
    ],
)
def test_validation_errors(rows, err):
    with pytest.raises(err):
        ingest_long(rows, K=1)


def test_cumulative_loss_examples():
    s = SubjectData("a", None, np.zeros(1), 2.0, 1, (np.array([0.5, 1.2]),))
    w = WeightScheme((1.0,), 2.0)
    assert cumulative_loss(s, w, 1.0) == 1
    assert cumulative_loss(s, w, 3.0) == 4
    c = SubjectData("b", None, np.zeros(1), 1.5, 0, (np.array([1.0]),))
    assert cumulative_loss(c, w, 2.0) == 1


def test_ties_and_multiplicity_count():
    d = ingest_long([rec("a", 1.0, 1), rec("a", 1.0, 1), rec("a", 1.0, 2)])
    assert cumulative_loss(d.subject("a"), WeightScheme((1.0,), 1.0), 1.0) == 3


def test_weight_scheme_validation():
    with pytest.raises(ValueError):
        WeightScheme((0.0,), 0.0)
    with pytest.raises(ValueError):
        WeightScheme((-1.0,), 1.0)


def _random_dataset(seed, n=12, K=2, clustered=False):
    rng = np.random.default_rng(seed)
    U = rng.uniform(0.5, 3.0, n).round(3)
    delta = rng.integers(0, 2, n)
    es, et, tt = [], [], []
    for i in range(n):
        for _ in range(rng.poisson(2)):
            es.append(i)
            et.append(int(rng.integers(1, K + 1)))
            tt.append(round(float(rng.uniform(0, U[i])), 3))
    Z = rng.normal(size=(n, 2)).round(3)
    cl = [f"c{i % 4}" for i in range(n)] if clustered else None
    ids = [f"s{i}" for i in range(n)]
    return EventDataset.from_arrays(Z, U, delta, es, et, tt, ids=ids, clusters=cl, K=K, covariate_names=("x", "y"))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 4), st.floats(0, 4))
def test_loss_monotone_and_constant_after_U(seed, t1, t2):
    d = _random_dataset(seed)
    w = WeightScheme((1.0, 0.5), 2.0)
    lo, hi = sorted((t1, t2))
    L = d.loss_matrix(w, [lo, hi, 10.0])
    assert np.all(L[:, 0] <= L[:, 1])
    LU = np.array([cumulative_loss(s, w, s.U) for s in d.subjects])
    np.testing.assert_array_equal(L[:, 2], LU)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.floats(0, 3), min_size=3, max_size=3), st.floats(0, 4))
def test_loss_linear_in_weights(seed, w, t):
    d = _random_dataset(seed)
    a = WeightScheme((w[0] + 1, w[1]), w[2])
    b = WeightScheme((0.5, 1.0), 1.0)
    s = d.subjects[0]
    assert cumulative_loss(s, a + b, t) == pytest.approx(cumulative_loss(s, a, t) + cumulative_loss(s, b, t))
    np.testing.assert_allclose(d.loss_matrix(a + b, [t]), d.loss_matrix(a, [t]) + d.loss_matrix(b, [t]))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.booleans())
def test_roundtrip_records_and_csv(tmp_path_factory, seed, clustered):
    d = _random_dataset(seed, clustered=clustered)
    again = ingest_long(to_records(d), K=d.K, covariate_names=d.covariate_names)
    assert again == d
    path = tmp_path_factory.mktemp("csv") / "d.csv"
    write_csv(d, path)
    assert read_csv(path, K=d.K) == d


def test_subset_and_with_covariates():
    d = _random_dataset(1, clustered=True)
    sub = d.subset([0, 2, 5])
    assert sub.n == 3 and sub.subject(d.ids[2]).U == d.U[2]
    e = d.with_covariates(["y"], intercept=True)
    assert e.covariate_names == ("(Intercept)", "y")
    np.testing.assert_array_equal(e.Z[:, 0], 1.0)
    assert d.n_units == 4 and d.cluster_mode
