import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cilforge.datastream import (DataManager, FormatError, SplitError, SplitMix64, build_task_splits,
                                 derive_seed, load_table_dataset, permutation, shuffle_class_order,
                                 synth_blobs, write_table_dataset)

M64 = 2**64 - 1


def ref_splitmix(seed):
    """Independent reference: straight from the published constants."""
    s = seed % 2**64
    while True:
        s = (s + 0x9E3779B97F4A7C15) % 2**64
        z = s
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) % 2**64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) % 2**64
        yield z ^ (z >> 31)


def ref_permutation(n, seed):
    g = ref_splitmix(seed)
    a = list(range(n))
    for i in range(n - 1, 0, -1):
        j = next(g) % (i + 1)
        a[i], a[j] = a[j], a[i]
    return a


def test_splitmix_known_vector():
    g = SplitMix64(1234567)
    assert [g.next() for _ in range(5)] == [6457827717110365317, 3203168211198807973,
                                            9817491932198370423, 4593380528125082431,
                                            16408922859458223821]


def test_reference_permutation_100_1993():
    assert list(shuffle_class_order(100, 1993).order) == ref_permutation(100, 1993)


def test_permutation_small_known():
    assert list(permutation(10, 1993)) == [7, 5, 4, 3, 8, 0, 1, 9, 2, 6]


def test_single_class_order():
    assert list(shuffle_class_order(1, 5).order) == [0]


@given(st.integers(1, 200), st.integers(0, M64))
def test_permutation_is_bijection_and_matches_reference(n, seed):
    p = list(permutation(n, seed))
    assert sorted(p) == list(range(n))
    assert p == ref_permutation(n, seed)


@given(st.lists(st.integers(0, M64), min_size=1, max_size=4))
def test_derive_seed_deterministic(parts):
    assert derive_seed(*parts) == derive_seed(*parts)


@pytest.mark.parametrize("n,init,inc,sizes", [
    (100, 10, 10, [10] * 10),
    (100, 50, 10, [50, 10, 10, 10, 10, 10]),
    (10, 4, 3, [4, 3, 3]),
])
def test_split_sizes(n, init, inc, sizes):
    assert [len(t) for t in build_task_splits(n, init, inc).tasks] == sizes


def test_split_rejects_ragged():
    with pytest.raises(SplitError):
        build_task_splits(10, 4, 4)


@given(st.integers(1, 10), st.integers(1, 10), st.integers(0, 8), st.integers(0, 2**32))
def test_split_partitions_classes(init, inc, extra_tasks, seed):
    n = init + inc * extra_tasks
    order = shuffle_class_order(n, seed)
    tasks = build_task_splits(n, init, inc, order).tasks
    flat = [c for t in tasks for c in t]
    assert sorted(flat) == list(range(n))
    assert len(tasks) == 1 + extra_tasks


def test_views():
    dm = DataManager(synth_blobs(100, 3, 4, seed=1, test_per_class=2), 10, 10)
    assert len(dm.get_dataset(0, "train").labels()) == 10
    cum = dm.get_dataset(2, "test", "cumulative")
    assert len(cum.labels()) == 30 and len(cum) == 30 * 2
    # stream-wide ids, contiguous per task
    assert sorted(dm.get_dataset(3, "train").labels()) == list(range(30, 40))
    with pytest.raises(IndexError):
        dm.get_dataset(10)


def test_relabel_tracks_class_order():
    pair = synth_blobs(10, 2, 3, seed=4)
    dm = DataManager(pair, 2, 2, seed=1993)
    for c in range(10):
        raw = dm.raw_class(c)
        np.testing.assert_array_equal(dm.data.train.x[dm.data.train.y == c], pair.train.x[pair.train.y == raw])


def test_batch_order_deterministic():
    a = DataManager(synth_blobs(4, 2, 3), 2, 2)
    b = DataManager(synth_blobs(4, 2, 3), 2, 2)
    assert a.batch_order(50, 1, 3) == b.batch_order(50, 1, 3)
    assert a.batch_order(50, 1, 3) != a.batch_order(50, 1, 4)


def test_blobs_deterministic_and_collapse():
    a, b = synth_blobs(3, 4, 5, seed=9), synth_blobs(3, 4, 5, seed=9)
    np.testing.assert_array_equal(a.train.x, b.train.x)
    z = synth_blobs(5, 3, 4, spread=0.0, seed=2)
    # zero spread: every test point sits on its class center, 1-NN is exact
    d = ((z.test.x[:, None] - z.train.x[None]) ** 2).sum(-1)
    assert (z.train.y[d.argmin(1)] == z.test.y).all()


def test_blobs_two_separated_classes_linearly_separable():
    pair = synth_blobs(2, 200, 8, spread=0.1, seed=3, center_scale=3.0)
    mu = np.stack([pair.train.x[pair.train.y == c].mean(0) for c in (0, 1)])
    w, b = mu[1] - mu[0], -(mu[1] @ mu[1] - mu[0] @ mu[0]) / 2
    pred = (pair.test.x @ w + b > 0).astype(int)
    assert (pred == pair.test.y).mean() > 0.99


def test_blobs_dim_check():
    with pytest.raises(ValueError):
        synth_blobs(2, 2, 1)


def test_clds_three_rows(tmp_path):
    p = tmp_path / "a.clds"
    p.write_text("clds v1 dim=2 classes=2\n0,1.0,2.0\n1,0.5,-1\n0,3,4\n")
    ds = load_table_dataset(p)
    assert len(ds) == 3 and ds.num_classes == 2


def test_clds_label_gap(tmp_path):
    p = tmp_path / "gap.clds"
    p.write_text("clds v1 dim=1 classes=3\n0,1.0\n2,2.0\n")
    with pytest.raises(FormatError):
        load_table_dataset(p)


@pytest.mark.parametrize("body,line", [
    ("0,1.0\n1,abc\n", 3),
    ("0,1.0\n1,2.0,3.0\n", 3),
    ("0,1.0\nx,2.0\n", 3),
])
def test_clds_malformed_row_reports_line(tmp_path, body, line):
    p = tmp_path / "bad.clds"
    p.write_text("clds v1 dim=1 classes=2\n" + body)
    with pytest.raises(FormatError, match=f":{line}:"):
        load_table_dataset(p)


def test_clds_bad_header(tmp_path):
    p = tmp_path / "h.clds"
    p.write_text("csv\n0,1\n")
    with pytest.raises(FormatError, match=":1:"):
        load_table_dataset(p)


@given(st.integers(1, 4), st.integers(1, 3), st.integers(2, 5), st.integers(0, 1000))
def test_clds_round_trip(classes, per, dim, seed):
    import tempfile
    from pathlib import Path
    ds = synth_blobs(classes, per, dim, seed=seed).train
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "rt.clds"
        write_table_dataset(ds, p)
        back = load_table_dataset(p)
    np.testing.assert_array_equal(back.x, ds.x)
    np.testing.assert_array_equal(back.y, ds.y)
    assert back.num_classes == ds.num_classes
