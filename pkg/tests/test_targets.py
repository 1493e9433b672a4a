import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from uha.autodiff import check_gradient
from uha.targets import (
    ConfigError,
    DimensionError,
    GaussianTarget,
    LibsvmParseError,
    LogisticRegression,
    MeanFieldGaussian,
    SparseDataset,
    StudentT,
    gaussian_grad_log_density,
    gaussian_log_density,
    load_libsvm,
    logistic_posterior_log_density,
    parse_libsvm,
    sample_q,
    serialize_libsvm,
    student_t_log_density,
)

NODES, WEIGHTS = np.polynomial.legendre.leggauss(2000)
GRID, GRID_W = 50.0 * NODES, 50.0 * WEIGHTS


def test_student_t_at_zero():
    assert student_t_log_density(np.zeros(1), 3.0) == pytest.approx(-1.000889, abs=1e-6)
    assert student_t_log_density(np.zeros(1), 3.0) == pytest.approx(stats.t.logpdf(0.0, 3), abs=1e-13)


@given(st.floats(-30, 30))
def test_student_t_symmetry(a):
    assert student_t_log_density(np.array([a]), 3.0) == student_t_log_density(np.array([-a]), 3.0)


def test_student_t_factorizes():
    one = student_t_log_density(np.zeros(1), 3.0)
    assert student_t_log_density(np.zeros(20), 3.0) == pytest.approx(20 * one, rel=1e-14)


@pytest.mark.parametrize("nu", [0.0, -1.0])
def test_student_t_rejects_bad_nu(nu):
    with pytest.raises(ConfigError):
        student_t_log_density(np.zeros(1), nu)
    with pytest.raises(ConfigError):
        StudentT(2, nu)


def test_student_t_matches_scipy(gen):
    z = gen.standard_t(3, size=(50, 4))
    for nu in (1.5, 3.0, 10.0):
        ours = student_t_log_density(z, nu)
        ref = stats.t.logpdf(z, nu).sum(-1)
        np.testing.assert_allclose(ours, ref, rtol=1e-12)


def test_student_t_gradient(gen):
    t = StudentT(3)
    z = gen.normal(size=3) * 2
    assert check_gradient(lambda v: t.log_density(v), z) < 1e-7
    h = 1e-6
    fd = [(t.log_density(z + h * e) - t.log_density(z - h * e)) / (2 * h) for e in np.eye(3)]
    np.testing.assert_allclose(t.grad_log_density(z), fd, rtol=1e-6)


@pytest.mark.parametrize("nu", [3.0, 5.0])
def test_student_t_mass_by_quadrature(nu):
    t = StudentT(1, nu)
    dens = np.exp(t.log_density(GRID[:, None]))
    inside = GRID_W @ dens
    tails = 2 * stats.t.sf(50.0, nu)
    assert inside + tails == pytest.approx(math.exp(t.known_log_z), abs=1e-6)


def test_student_t_moments():
    mean, var = StudentT(20).known_moments
    assert np.all(mean == 0) and np.all(var == 3.0)


def test_gaussian_examples():
    std = MeanFieldGaussian.standard(1)
    assert gaussian_log_density(np.zeros(1), std) == pytest.approx(-0.9189385, abs=1e-7)
    shifted = MeanFieldGaussian(np.ones(1), np.zeros(1))
    assert gaussian_log_density(np.ones(1), shifted) == pytest.approx(-0.9189385, abs=1e-7)
    wide = MeanFieldGaussian(np.zeros(1), np.array([math.log(2.0)]))
    assert gaussian_log_density(np.array([2.0]), wide) == pytest.approx(-2.1120857, abs=1e-7)
    assert gaussian_log_density(np.array([2.0]), wide) == pytest.approx(stats.norm.logpdf(2.0, 0, 2))


def test_gaussian_dimension_mismatch():
    with pytest.raises(DimensionError):
        gaussian_log_density(np.zeros(3), MeanFieldGaussian.standard(2))


@given(st.floats(-5, 5), st.floats(math.log(0.1), math.log(10.0)))
def test_gaussian_integrates_to_one(loc, log_scale):
    q = MeanFieldGaussian(np.array([loc]), np.array([log_scale]))
    mass = GRID_W @ np.exp(gaussian_log_density(GRID[:, None], q))
    assert mass == pytest.approx(1.0, abs=1e-6)


def test_gaussian_target_normalized():
    g = GaussianTarget(np.array([0.3]), np.array([0.2]))
    assert GRID_W @ np.exp(g.log_density(GRID[:, None])) == pytest.approx(math.exp(g.known_log_z), abs=1e-6)


def test_gaussian_gradient(gen):
    q = MeanFieldGaussian(gen.normal(size=3), gen.normal(size=3) * 0.3)
    z = gen.normal(size=3)
    assert check_gradient(lambda v: gaussian_log_density(v, q), z) < 1e-8
    h = 1e-6
    fd = [(gaussian_log_density(z + h * e, q) - gaussian_log_density(z - h * e, q)) / (2 * h)
          for e in np.eye(3)]
    np.testing.assert_allclose(gaussian_grad_log_density(z, q), fd, rtol=1e-6)


def test_sample_q_examples(gen):
    q = MeanFieldGaussian(np.array([0.7, -1.0]), np.array([0.3, 0.1]))
    z, xi = sample_q(q, np.zeros(2))
    np.testing.assert_array_equal(z, q.loc)
    narrow = MeanFieldGaussian(q.loc, np.full(2, -30.0))
    z, _ = sample_q(narrow, gen.normal(size=2) * 3)
    np.testing.assert_allclose(z, q.loc, atol=1e-12)
    z, xi = sample_q(MeanFieldGaussian.standard(1), np.array([1.5]))
    assert z[0] == 1.5 and xi[0] == 1.5


def _one_row(x, y):
    return SparseDataset(len(x), (tuple((i, float(v)) for i, v in enumerate(x) if v != 0),), (y,))


def test_logistic_zero_weights():
    d = 5
    data = _one_row([1.0, 0.0, 2.0, 0.0, -1.0], 1)
    expected = -math.log(2.0) - 0.5 * d * math.log(2 * math.pi)
    assert logistic_posterior_log_density(np.zeros(d), data) == pytest.approx(expected, abs=1e-14)


def test_logistic_single_row_example():
    data = _one_row([1.0], 1)
    value = logistic_posterior_log_density(np.array([2.0]), data)
    expected = -math.log1p(math.exp(-2.0)) - 2.0 - 0.5 * math.log(2 * math.pi)
    assert value == pytest.approx(-3.045867, abs=1e-6)
    assert value == pytest.approx(expected, abs=1e-14)


def test_logistic_label_flip_symmetry(gen):
    x = gen.normal(size=4)
    w = gen.normal(size=4)
    neg = logistic_posterior_log_density(w, _one_row(x, -1))
    pos = logistic_posterior_log_density(-w, _one_row(x, 1))
    assert neg == pytest.approx(pos, abs=1e-13)


def test_logistic_stable_at_large_margins():
    data = _one_row([1.0], 1)
    assert np.isfinite(logistic_posterior_log_density(np.array([-800.0]), data))


def _random_dataset(gen, n, d):
    rows, labels = [], []
    for _ in range(n):
        mask = gen.random(d) < 0.6
        rows.append(tuple((int(i), float(gen.normal())) for i in np.flatnonzero(mask)))
        labels.append(int(gen.choice([-1, 1])))
    return SparseDataset(d, tuple(rows), tuple(labels))


@pytest.mark.parametrize("n,d", [(1, 1), (5, 3), (20, 10)])
def test_logistic_gradient_matches_finite_differences(gen, n, d):
    target = LogisticRegression(_random_dataset(gen, n, d))
    for _ in range(3):
        w = gen.normal(size=d)
        assert check_gradient(target.log_density, w, step=1e-5) < 1e-6
        h = 1e-6
        fd = [(target.log_density(w + h * e) - target.log_density(w - h * e)) / (2 * h) for e in np.eye(d)]
        np.testing.assert_allclose(target.grad_log_density(w), fd, rtol=1e-5, atol=1e-8)


def test_logistic_dimension_mismatch(gen):
    target = LogisticRegression(_random_dataset(gen, 3, 4))
    with pytest.raises(DimensionError):
        target.log_density(np.zeros(5))


def test_logistic_records_prior(gen):
    desc = LogisticRegression(_random_dataset(gen, 3, 4)).describe()
    assert "normal(0, 1)" in desc["prior"] and "no intercept" in desc["prior"]


def test_parse_examples():
    d = parse_libsvm("+1 3:1 11:1\n")
    assert d.labels == (1,) and d.rows[0] == ((2, 1.0), (10, 1.0)) and d.n_features == 11
    d = parse_libsvm("-1\n", n_features=4)
    assert d.labels == (-1,) and d.rows[0] == () and np.all(d.dense() == 0)
    d = parse_libsvm("0 1:2.5\n")
    assert d.labels == (-1,) and d.rows[0] == ((0, 2.5),)


def test_parse_skips_blank_lines_and_overrides_features():
    d = parse_libsvm(io.StringIO("\n+1 2:1\n\n-1 1:0.5\n"), n_features=123)
    assert d.n_rows == 2 and d.n_features == 123


@pytest.mark.parametrize("text,line", [
    ("+1 1:1\n-1 3:1 2:1\n", 2),
    ("+1 1:1\n\n+1 a:1\n", 3),
    ("+1 1:x\n", 1),
    ("2 1:1\n", 1),
    ("+1 1:1 1:2\n", 1),
    ("+1 4\n", 1),
])
def test_parse_errors_carry_line_numbers(text, line):
    with pytest.raises(LibsvmParseError) as err:
        parse_libsvm(text)
    assert err.value.line_no == line


def test_sparse_dataset_invariants():
    with pytest.raises(ValueError):
        SparseDataset(3, (((1, 1.0), (0, 1.0)),), (1,))
    with pytest.raises(ValueError):
        SparseDataset(3, (((3, 1.0),),), (1,))
    with pytest.raises(ValueError):
        SparseDataset(3, ((),), (0,))


rows_strategy = st.lists(
    st.tuples(
        st.sampled_from([-1, 1]),
        st.sets(st.integers(0, 29), max_size=8),
        st.lists(st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False, width=64), min_size=8, max_size=8),
    ),
    max_size=10,
)


@given(rows_strategy)
def test_parse_serialize_round_trip(rows):
    labels = tuple(r[0] for r in rows)
    entries = tuple(tuple((i, v) for i, v in zip(sorted(r[1]), r[2])) for r in rows)
    data = SparseDataset(30, entries, labels)
    back = parse_libsvm(serialize_libsvm(data), n_features=30)
    assert back == data


def test_load_libsvm_fixture(tmp_path):
    path = tmp_path / "x.libsvm"
    path.write_text("+1 1:1 3:1\n-1 2:1\n+1 3:0.5\n")
    d = load_libsvm(path, n_features=5, max_rows=2)
    assert d.n_rows == 2 and d.n_features == 5
