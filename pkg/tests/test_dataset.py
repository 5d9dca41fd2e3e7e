import numpy as np
import pytest

from cadseq import dataset, geometry
from cadseq.core import CLS, PAD, CadSequence, deserialize_sequence, serialize_tree, validate_sequence
from cadseq.dataset import DatasetError


def _dummy(n):
    return CadSequence.from_tokens([(CLS, PAD)] + [(100, PAD)] * (n - 1), 240)


def test_determinism():
    a = dataset.generate(30, (20, 80), seed=5)
    b = dataset.generate(30, (20, 80), seed=5)
    assert a == b
    assert a != dataset.generate(30, (20, 80), seed=6)


def test_generator_output_is_valid(corpus_short):
    for tree in corpus_short:
        seq = serialize_tree(tree)
        assert 20 <= seq.valid_len <= 60
        assert deserialize_sequence(seq) == tree
        assert validate_sequence(seq).ok
        n_steps = len(tree.steps())
        assert 1 <= n_steps <= 6
        assert all(1 <= len(sk) <= 3 for sk, _ in tree.steps())


def test_long_range():
    for tree in dataset.generate(5, (160, 240), seed=2):
        assert 160 <= serialize_tree(tree).valid_len <= 240


@pytest.mark.parametrize("rng", [(1, 40), (50, 40), (2, 241), (2, 10)])
def test_infeasible_range(rng):
    with pytest.raises(DatasetError):
        dataset.generate(1, rng)


class TestStats:
    def test_hand_count(self):
        s = dataset.stats([_dummy(n) for n in (10, 50, 70, 100)])
        assert s.total == 4
        assert s.avg_length == 57.5
        assert s.bins == (25.0, 25.0, 25.0, 25.0, 0.0)

    def test_single_long(self):
        assert dataset.stats([_dummy(240)]).bins == (0.0, 0.0, 0.0, 0.0, 100.0)

    def test_bins_sum(self, corpus_short):
        assert abs(sum(dataset.stats(corpus_short).bins) - 100) <= 0.1

    def test_empty(self):
        with pytest.raises(DatasetError):
            dataset.stats([])

    def test_reference_row(self):
        csv = dataset.stats_csv({"x": dataset.stats([_dummy(10)])})
        last = csv.strip().splitlines()[-1].split(",")
        assert last[1:] == ["215914", "36.20", "76.60", "12.00", "5.90", "5.20", "0.21"]

    def test_command_count(self, corpus_short):
        tree = corpus_short[0]
        n = sum(1 + sum(len(lp) for f in sk for lp in f) for sk, _ in tree.steps())
        assert dataset.program_length(tree, "commands") == n


class TestSplit:
    def test_all_train(self):
        items = [_dummy(n) for n in range(10, 30)]
        train, val, test = dataset.split(items, (1, 0, 0))
        assert len(train) == 20 and not val and not test

    def test_sizes_and_disjoint(self):
        items = [_dummy(n) for n in range(2, 102)]
        parts = dataset.split(items, (0.8, 0.1, 0.1), seed=3)
        assert tuple(map(len, parts)) == (80, 10, 10)
        keys = [s.valid_len for p in parts for s in p]
        assert sorted(keys) == list(range(2, 102))
        assert dataset.split(items, (0.8, 0.1, 0.1), seed=3) == parts

    def test_stratification(self):
        rng = np.random.default_rng(0)
        items = [_dummy(int(n)) for n in rng.integers(2, 241, 400)]
        whole = np.array(dataset.stats(items).bins)
        for part in dataset.split(items, (0.8, 0.1, 0.1), seed=1):
            assert np.all(np.abs(np.array(dataset.stats(part).bins) - whole) <= 5.0)

    @pytest.mark.parametrize("ratios", [(0.5, 0.5, 0.5), (1.2, -0.2, 0), (1, 0)])
    def test_bad_ratios(self, ratios):
        with pytest.raises(DatasetError):
            dataset.split([_dummy(5)], ratios)


def test_corpus_directory(tmp_path, corpus_short):
    man = dataset.write_corpus(tmp_path, corpus_short[:5], seed=9, n_ts=64)
    back = dataset.read_corpus(tmp_path)
    assert [deserialize_sequence(s) for s in back] == corpus_short[:5]
    assert man["count"] == 5 and dataset.read_manifest(tmp_path) == man
    assert all(geometry.execute(deserialize_sequence(s), 32).volume() > 0 for s in back)
