import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ibcd import io, priorfit, simcore, tce
from ibcd.errors import DataIOError
from ibcd.sampler import PosteriorDraws
from ibcd.simcore import GraphSpec


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=6, max_size=6))
def test_matrix_round_trip_is_exact(tmp_path_factory, vals):
    path = tmp_path_factory.mktemp("m") / "m.tsv"
    m = np.array(vals).reshape(2, 3)
    io.write_matrix(path, m, ["a", "b", "c"])
    back, names = io.read_matrix(path)
    assert back.tobytes() == m.tobytes() and names == ["a", "b", "c"]


def test_float_format_is_shortest():
    assert io.format_cell(0.05) == "0.05"
    assert io.format_cell(np.float64(1e-300)) == "1e-300"
    assert io.format_cell(3) == "3"


@pytest.fixture(scope="module")
def small():
    g = simcore.generate_graph(GraphSpec(4, "ER", 0.6, seed=2))
    return g, simcore.simulate_dataset(g, 30, seed=2)


def test_dataset_round_trip(tmp_path, small):
    _, data = small
    io.write_dataset(tmp_path, data)
    back, names = io.read_dataset(tmp_path)
    assert names == ["V0", "V1", "V2", "V3"]
    assert back.Y.tobytes() == data.Y.tobytes()
    np.testing.assert_array_equal(back.design.assignment, data.design.assignment)
    np.testing.assert_array_equal(back.design.beta, data.design.beta)
    np.testing.assert_array_equal(back.control_rows, data.control_rows)


def test_dataset_errors(tmp_path, small):
    _, data = small
    with pytest.raises(DataIOError):
        io.read_dataset(tmp_path)
    io.write_dataset(tmp_path, data)
    text = (tmp_path / "design.tsv").read_text().replace("\tV2\t", "\tV9\t", 1)
    (tmp_path / "design.tsv").write_text(text)
    with pytest.raises(DataIOError, match="unknown target"):
        io.read_dataset(tmp_path)
    lines = (tmp_path / "Y.tsv").read_text().splitlines()
    lines[3] = lines[3].rsplit("\t", 1)[0]
    (tmp_path / "Y.tsv").write_text("\n".join(lines) + "\n")
    with pytest.raises(DataIOError, match="ragged"):
        io.read_dataset(tmp_path)


def test_missing_output_directory(tmp_path):
    with pytest.raises(DataIOError):
        io.write_matrix(tmp_path / "nope" / "m.tsv", np.eye(2))


def test_truth_round_trip(tmp_path, small):
    g, _ = small
    io.write_truth(tmp_path / "truth.tsv", g)
    back = io.read_truth(tmp_path / "truth.tsv")
    assert back.weights.tobytes() == g.weights.tobytes()


def test_groups_round_trip(tmp_path):
    labels = ["b1", "b1", "b2", "b2"]
    mask = [True, False, True, False]
    io.write_groups(tmp_path / "groups.tsv", labels, mask)
    lab, m = io.read_groups(tmp_path / "groups.tsv")
    assert lab.tolist() == labels and m.tolist() == mask
    (tmp_path / "bad.tsv").write_text("group\tcontrol\nb1\tyes\n")
    with pytest.raises(DataIOError):
        io.read_groups(tmp_path / "bad.tsv")


def test_summary_and_prior_round_trip(tmp_path, small):
    _, data = small
    s = tce.build_summary(data)
    io.write_summary(tmp_path, s)
    back = io.read_summary(tmp_path)
    for name in ("r_hat", "se", "u", "v"):
        assert getattr(back, name).tobytes() == getattr(s, name).tobytes()
    assert back.n_obs == s.n_obs
    prior = priorfit.fit_prior(s, data.Y[data.control_rows], "ER")
    io.write_prior(tmp_path, prior)
    pb = io.read_prior(tmp_path)
    assert pb.pi0.tobytes() == prior.pi0.tobytes()
    assert (pb.tau, pb.sigma0_sq) == (prior.tau, prior.sigma0_sq)


def test_draws_round_trip_and_truncation(tmp_path):
    rng = np.random.default_rng(0)
    s = rng.standard_normal((2, 5, 12))
    z = np.zeros((2, 5))
    d = PosteriorDraws(s, z.astype(bool), z, z, z, np.ones(2), np.ones((2, 12)), seed=9, dim=3)
    io.write_draws(tmp_path / "draws.bin", d)
    body, dim, seed = io.read_draws(tmp_path / "draws.bin")
    assert (dim, seed) == (3, 9)
    assert body.tobytes() == s[:, :, :6].tobytes()
    raw = (tmp_path / "draws.bin").read_bytes()
    (tmp_path / "cut.bin").write_bytes(raw[:-8])
    with pytest.raises(DataIOError, match="truncated"):
        io.read_draws(tmp_path / "cut.bin")
    (tmp_path / "junk.bin").write_bytes(b"x" * 64)
    with pytest.raises(DataIOError):
        io.read_draws(tmp_path / "junk.bin")


def test_manifest_detects_changes(tmp_path):
    a = io.write_matrix(tmp_path / "a.tsv", np.eye(2))
    b = io.write_matrix(tmp_path / "b.tsv", np.ones((2, 2)))
    man = io.write_manifest(tmp_path, "stage", {"k": 1}, {"a": a}, {"b": b}, seed=3)
    rec = json.loads(man.read_text())
    assert rec["seed"] == 3 and rec["stage"] == "stage"
    assert io.verify_manifest(man) == []
    io.write_matrix(b, np.zeros((2, 2)))
    assert io.verify_manifest(man) == [str(b)]
    a.unlink()
    assert set(io.verify_manifest(man)) == {str(a), str(b)}


def test_malformed_matrix(tmp_path):
    (tmp_path / "m.tsv").write_text("a\tb\n1\tx\n")
    with pytest.raises(DataIOError):
        io.read_matrix(tmp_path / "m.tsv")
