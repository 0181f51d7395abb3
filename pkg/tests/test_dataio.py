import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import sparse
from scipy.optimize import minimize

from delayadapt.dataio import (
    Dataset,
    RunTrace,
    format_libsvm,
    load_libsvm,
    parse_libsvm,
    partition_batches,
    read_trace_csv,
    synth_logreg,
    write_libsvm,
    write_trace_csv,
)
from delayadapt.delay import DelayModel
from delayadapt.errors import ConfigError, DimensionError, LabelError, ParseError
from delayadapt.numkit import LogisticProblem, logreg_value_grad
from delayadapt.piag_sim import piag_run
from delayadapt.stepsize import make_policy


def test_parse_example():
    data = parse_libsvm("+1 3:1.5 7:0.5\n")
    row = data.row(0)
    assert row.indices.tolist() == [2, 6]
    assert row.values.tolist() == [1.5, 0.5]
    assert data.labels.tolist() == [1.0]
    assert data.dim == 7 and data.n_samples == 1


def test_parse_dim_override_and_comments():
    data = parse_libsvm("-1 1:2 # comment\n\n0 2:1\n", dim=5)
    assert data.dim == 5
    assert data.labels.tolist() == [-1.0, -1.0]
    with pytest.raises(DimensionError):
        parse_libsvm("1 9:1\n", dim=5)


def test_label_rules():
    text = "0 1:1\n3 1:1\n8 1:1\n"
    assert parse_libsvm(text).labels.tolist() == [-1, 1, 1]
    assert parse_libsvm(text, label_rule="even-odd").labels.tolist() == [1, -1, 1]
    with pytest.raises(ParseError):
        parse_libsvm(text, label_rule="strict")
    with pytest.raises(ConfigError):
        parse_libsvm(text, label_rule="parity")


@pytest.mark.parametrize(
    "text, line",
    [
        ("", None),
        ("\n  \n", None),
        ("1 1:2\nx 1:1\n", 2),
        ("1 1:2\n1 3:1 2:1\n", 2),
        ("1 1:2\n1 2:1 2:1\n", 2),
        ("1 0:1\n", 1),
        ("1 1:2\n1 1:2\n-1 4\n", 3),
        ("1 1:abc\n", 1),
        ("1 1:nan\n", 1),
    ],
)
def test_parse_errors_carry_line_numbers(text, line):
    with pytest.raises(ParseError) as err:
        parse_libsvm(io.StringIO(text))
    assert err.value.line == line
    if line is None:
        assert "empty dataset" in str(err.value)


def test_load_libsvm_reports_path(tmp_path):
    path = tmp_path / "bad.svm"
    path.write_text("1 1:1\n1 1:x\n")
    with pytest.raises(ParseError) as err:
        load_libsvm(path)
    assert str(path) in str(err.value) and err.value.line == 2


def test_dataset_invariants():
    with pytest.raises(DimensionError):
        Dataset(sparse.csr_matrix(np.ones((2, 2))), np.ones(3))
    with pytest.raises(LabelError):
        Dataset(sparse.csr_matrix(np.ones((2, 2))), np.array([1.0, 0.0]))


@st.composite
def datasets(draw):
    N = draw(st.integers(1, 12))
    d = draw(st.integers(1, 15))
    values = st.floats(-1e6, 1e6, allow_nan=False).filter(lambda v: v != 0)
    dense = np.zeros((N, d))
    for i in range(N):
        cols = draw(st.sets(st.integers(0, d - 1), max_size=d))
        for j in cols:
            dense[i, j] = draw(values)
    labels = np.array(draw(st.lists(st.sampled_from([-1.0, 1.0]), min_size=N, max_size=N)))
    return Dataset(sparse.csr_matrix(dense), labels)


@given(datasets())
def test_libsvm_round_trip(data):
    again = parse_libsvm(format_libsvm(data), dim=data.dim)
    assert again == data
    assert format_libsvm(again) == format_libsvm(data)


def test_write_and_load(tmp_path):
    data = synth_logreg(30, 8, seed=3)
    path = tmp_path / "d.svm"
    write_libsvm(data, path)
    assert load_libsvm(path, dim=8) == data
    scaled = load_libsvm(path, dim=8, scale=True)
    assert np.allclose(abs(scaled.features).max(axis=0).toarray(), 1.0)


def test_partition_examples():
    assert [len(b) for b in partition_batches(7, 3)] == [3, 2, 2]
    assert [b.tolist() for b in partition_batches(10, 10)] == [[i] for i in range(10)]
    with pytest.raises(ConfigError):
        partition_batches(3, 4)
    with pytest.raises(ConfigError):
        partition_batches(3, 0)


@given(st.integers(1, 500), st.data())
def test_partition_covers_without_overlap(N, data):
    n = data.draw(st.integers(1, N))
    batches = partition_batches(N, n)
    assert len(batches) == n
    flat = np.concatenate(batches)
    assert flat.tolist() == list(range(N))
    sizes = [len(b) for b in batches]
    assert max(sizes) - min(sizes) <= 1


def test_synth_is_deterministic_and_default_scale():
    a, b = synth_logreg(seed=7), synth_logreg(seed=7)
    assert a.n_samples == 200 and a.dim == 50
    assert format_libsvm(a) == format_libsvm(b)
    assert a != synth_logreg(seed=8)


def test_separable_data_is_fit_exactly():
    data = synth_logreg(100, 10, seed=0)
    A = data.features.toarray()
    res = minimize(lambda x: logreg_value_grad(data, x), np.zeros(10), jac=True, method="L-BFGS-B",
                   options={"maxiter": 5000})
    accuracy = np.mean(np.sign(A @ res.x) == data.labels)
    assert accuracy == 1.0


def test_noisy_labels_flip_some_signs():
    clean = synth_logreg(400, 10, seed=0)
    noisy = synth_logreg(400, 10, seed=0, separability=1.0)
    assert 0 < np.mean(clean.labels != noisy.labels) < 0.5


@st.composite
def traces(draw):
    n = draw(st.integers(0, 20))
    floats = st.floats(allow_nan=True, allow_infinity=True, width=64)
    rows = []
    for k in range(n):
        rows.append(
            {
                "k": k,
                "block": draw(st.integers(-1, 5)),
                "tau": draw(st.integers(0, k)),
                "gamma": draw(st.floats(0, 1e3)),
                "objective": draw(floats),
                "metric": draw(floats),
                "step_sq": draw(floats),
                "dist_sq": draw(floats),
            }
        )
    workers = draw(st.integers(0, 3))
    wt = np.array(draw(st.lists(st.lists(st.integers(0, 9), min_size=workers, max_size=workers),
                                 min_size=n, max_size=n)), dtype=np.int64).reshape(n, workers) if workers else None
    config = {"algo": "piag", "h": draw(st.floats(0.01, 0.99)), "n_workers": workers, "note": "x y"}
    final = {"objective": draw(floats), "diverged": draw(st.booleans()),
             "x": np.array(draw(st.lists(st.floats(-1e9, 1e9), max_size=4)))}
    return RunTrace.from_rows(rows, config=config, final=final, worker_tau=wt)


@given(traces())
def test_trace_csv_round_trip(tmp_path_factory, trace):
    path = tmp_path_factory.mktemp("tr") / "t.csv"
    write_trace_csv(trace, path)
    assert read_trace_csv(path).equals(trace)


def test_empty_trace_is_header_only(tmp_path):
    path = tmp_path / "e.csv"
    trace = RunTrace.from_rows([], config={"algo": "bcd"})
    write_trace_csv(trace, path)
    lines = path.read_text().splitlines()
    assert lines == ["#algo=bcd", "k,block,tau,gamma,objective,metric,step_sq,dist_sq"]
    assert len(read_trace_csv(path)) == 0


def test_trace_rejects_bad_rows(tmp_path):
    with pytest.raises(Exception):
        RunTrace.from_rows([{"k": 1, "gamma": 0.1}, {"k": 1, "gamma": 0.1}])
    with pytest.raises(Exception):
        RunTrace.from_rows([{"k": 0, "gamma": -0.1}])
    path = tmp_path / "bad.csv"
    path.write_text("#a=1\nk,block,tau,gamma,objective,metric,step_sq,dist_sq\n0,1,0\n")
    with pytest.raises(ParseError) as err:
        read_trace_csv(path)
    assert err.value.line == 3
    path.write_text("#a=1\n")
    with pytest.raises(ParseError):
        read_trace_csv(path)


def test_header_echoes_run_parameters(tmp_path):
    data = synth_logreg(40, 6, seed=1)
    prob = LogisticProblem(data, partition_batches(data, 4), lam1=1e-5, lam2=1e-4)
    policy = make_policy("adaptive2", prob, algo="piag", h=0.99)
    trace = piag_run(prob, DelayModel("constant", tau=2), policy, 5)
    path = tmp_path / "run.csv"
    write_trace_csv(trace, path)
    header = [line for line in path.read_text().splitlines() if line.startswith("#")]
    assert "#h=0.98999999999999999" in header or "#h=0.99" in header
    assert "#lam1=1.0000000000000001e-05" in header or "#lam1=1e-05" in header
    assert "#lam2=0.0001" in header or "#lam2=0.00010000000000000001" in header
    back = read_trace_csv(path)
    assert back.config["h"] == 0.99 and back.config["lam1"] == 1e-5 and back.config["lam2"] == 1e-4
    assert math.isclose(back.final["objective"], trace.final["objective"], rel_tol=0, abs_tol=0)
