import numpy as np
import pytest

from mtil.data import (
    Dataset,
    DatasetFormatError,
    Trajectory,
    all_chunk_targets,
    chunk_targets,
    dataset_bytes,
    export_csv,
    parse_dataset,
    read_dataset,
    write_dataset,
)


def traj5():
    acts = np.arange(1.0, 6.0)[:, None] * np.array([[1.0, -1.0]])  # a_t = (t, -t)
    return Trajectory(np.zeros((5, 3)), acts, "toy", 3, True)


def a(t):
    return [float(t), -float(t)]


def test_in_range_slice():
    np.testing.assert_array_equal(chunk_targets(traj5(), 2, 3), [a(2), a(3), a(4)])


def test_padding_repeats_last_action():
    np.testing.assert_array_equal(chunk_targets(traj5(), 4, 3), [a(4), a(5), a(5)])


@pytest.mark.parametrize("K", [1, 2, 7, 50])
def test_last_step_repeats(K):
    np.testing.assert_array_equal(chunk_targets(traj5(), 5, K), [a(5)] * K)


def test_k1_is_current_action():
    tr = traj5()
    for t in range(1, 6):
        np.testing.assert_array_equal(chunk_targets(tr, t, 1), [tr.actions[t - 1]])


def test_out_of_range_t():
    with pytest.raises(IndexError):
        chunk_targets(traj5(), 0, 2)
    with pytest.raises(IndexError):
        chunk_targets(traj5(), 6, 2)


def test_rows_are_demonstrated_actions_and_stack_matches():
    rng = np.random.default_rng(0)
    tr = Trajectory(rng.normal(size=(9, 2)), rng.normal(size=(9, 3)))
    stack = all_chunk_targets(tr, 4)
    for t in range(1, 10):
        block = chunk_targets(tr, t, 4)
        np.testing.assert_array_equal(stack[(t - 1) * 4:t * 4], block)
        for row in block:
            assert any(np.array_equal(row, act) for act in tr.actions)


def random_dataset(n, seed=0):
    rng = np.random.default_rng(seed)
    ds = Dataset(4, 2)
    for i in range(n):
        T = int(rng.integers(1, 30))
        ds.append(Trajectory(rng.normal(size=(T, 4)), rng.normal(size=(T, 2)),
                             f"task-{i % 3}", int(rng.integers(-2**62, 2**62)), bool(i % 2)))
    return ds


def test_round_trip_100_trajectories(tmp_path):
    ds = random_dataset(100)
    write_dataset(ds, tmp_path / "d.mtilds")
    back = read_dataset(tmp_path / "d.mtilds")
    assert (back.obs_dim, back.action_dim) == (4, 2)
    assert back.trajectories == ds.trajectories
    assert dataset_bytes(back) == dataset_bytes(ds)


def test_empty_dataset_round_trips():
    back = parse_dataset(dataset_bytes(Dataset(7, 3)))
    assert (back.obs_dim, back.action_dim, len(back)) == (7, 3, 0)


def test_corrupted_magic():
    buf = bytearray(dataset_bytes(random_dataset(3)))
    buf[0] ^= 0xFF
    with pytest.raises(DatasetFormatError, match="magic"):
        parse_dataset(bytes(buf))


def test_truncated_and_trailing_bytes():
    buf = dataset_bytes(random_dataset(3))
    with pytest.raises(DatasetFormatError, match="truncated"):
        parse_dataset(buf[:-1])
    with pytest.raises(DatasetFormatError, match="trailing"):
        parse_dataset(buf + b"\0")


def test_version_mismatch():
    buf = bytearray(dataset_bytes(random_dataset(1)))
    buf[6] = 9
    with pytest.raises(DatasetFormatError, match="version"):
        parse_dataset(bytes(buf))


def test_dimension_checks():
    with pytest.raises(ValueError):
        Dataset(4, 2, [Trajectory(np.zeros((3, 5)), np.zeros((3, 2)))])
    with pytest.raises(ValueError):
        Trajectory(np.zeros((3, 2)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        Trajectory(np.zeros((0, 2)), np.zeros((0, 2)))
    with pytest.raises(ValueError):
        Trajectory(np.full((1, 2), np.inf), np.zeros((1, 2)))


def test_csv_export_is_lossless(tmp_path):
    ds = random_dataset(3, seed=1)
    paths = export_csv(ds, tmp_path)
    assert len(paths) == 3
    rows = np.loadtxt(paths[1], delimiter=",", skiprows=1, ndmin=2)
    tr = ds[1]
    np.testing.assert_array_equal(rows[:, 0], np.arange(1, len(tr) + 1))
    np.testing.assert_array_equal(rows[:, 1:5], tr.observations)
    np.testing.assert_array_equal(rows[:, 5:], tr.actions)
