from collections import Counter

import numpy as np
import pytest

from trec.codec import SPECIALS, Vocabulary
from trec.data import (
    BatchStream,
    ParallelPair,
    ParaphraseRules,
    TaskSpec,
    collate,
    generate_task,
    load_corpus,
    make_batches,
    save_corpus,
    task_vocabulary,
)


def test_copy_deterministic():
    spec = TaskSpec(kind="copy", n_train=300, n_valid=50, seed=4)
    a, b = generate_task(spec), generate_task(spec)
    assert a[0] == b[0] and a[1] == b[1]
    assert all(p.source == p.target for p in a[0])


def test_reverse_involution():
    train, valid, _ = generate_task(TaskSpec(kind="reverse", n_train=500, n_valid=100))
    for p in train + valid:
        assert p.target[::-1] == p.source


def test_splits_disjoint_exhaustive():
    train, valid, _ = generate_task(TaskSpec(kind="reverse", n_train=9000, n_valid=1000, seed=11))
    sources = Counter(p.source for p in train + valid)
    assert len(train) + len(valid) == 10_000
    assert max(sources.values()) == 1
    assert not {p.source for p in train} & {p.source for p in valid}


def test_lengths_and_vocab_respected():
    spec = TaskSpec(kind="reverse", vocab_size=16, min_len=2, max_len=12, n_train=2000, n_valid=0)
    train, _, vocab = generate_task(spec)
    assert len(vocab) == 16
    assert all(2 <= len(p.source) <= 12 for p in train)
    assert all(t not in vocab.specials for p in train for t in p.source)


def test_paraphrase_structure():
    vocab = task_vocabulary(16)
    rules = ParaphraseRules(vocab)
    rng = np.random.default_rng(0)
    src = [4, 5, 6, 7, rules.filler, 8]
    outs = {tuple(rules(src, rng)) for _ in range(50)}
    # one shared coin per sentence: exactly two targets, differing at every paired position
    assert outs == {(4, 6, 6, 8, 4), (5, 7, 7, 9, 5)}
    assert rules([rules.filler], rng) == []


def test_paraphrase_task_has_two_targets_per_source():
    train, _, vocab = generate_task(TaskSpec(kind="template_paraphrase", n_train=2000, n_valid=0, seed=2))
    rules = ParaphraseRules(vocab)
    registers = []
    for p in train:
        options = [tuple(rules.rewrite(p.source, r)) for r in (0, 1)]
        assert p.target in options
        registers.append(options.index(p.target))
    assert 0.45 < np.mean(registers) < 0.55


def test_space_check():
    with pytest.raises(ValueError, match="distinct"):
        generate_task(TaskSpec(kind="copy", vocab_size=6, min_len=1, max_len=2, n_train=100, n_valid=0))


def test_taskspec_validation():
    with pytest.raises(ValueError):
        TaskSpec(kind="sorting")
    with pytest.raises(ValueError):
        TaskSpec(min_len=5, max_len=3)
    with pytest.raises(ValueError):
        TaskSpec(kind="file")


def test_pair_validation():
    with pytest.raises(ValueError):
        ParallelPair((), (1,))


@pytest.fixture
def vocab():
    return Vocabulary.from_symbols(["a", "b", "c", "d"])


def test_load_corpus_basic(tmp_path, vocab):
    f = tmp_path / "c.tsv"
    f.write_text("a b\tc d\n\nb zz\ta\n")
    pairs, stats = load_corpus(f, vocab)
    assert pairs[0] == ParallelPair([4, 5], [6, 7])
    assert pairs[1].source == (5, vocab.unk_id)
    assert stats.n_unk == 1 and stats.n_lines == 2


def test_load_corpus_empty_and_errors(tmp_path, vocab):
    f = tmp_path / "empty.tsv"
    f.write_text("")
    assert load_corpus(f, vocab)[0] == []
    g = tmp_path / "bad.tsv"
    g.write_text("a b\tc\nno tab here\n")
    with pytest.raises(ValueError, match=":2:"):
        load_corpus(g, vocab)


def test_load_corpus_drops_overlong(tmp_path, vocab):
    f = tmp_path / "c.tsv"
    f.write_text("a b c\td\na\tb\n")
    pairs, stats = load_corpus(f, vocab, max_len=2)
    assert len(pairs) == 1 and stats.n_dropped == 1


def test_corpus_roundtrip_does_not_touch_input(tmp_path):
    train, _, vocab = generate_task(TaskSpec(kind="reverse", n_train=50, n_valid=0))
    path = tmp_path / "t.tsv"
    save_corpus(train, vocab, path)
    before = path.read_bytes()
    assert load_corpus(path, vocab)[0] == train
    assert path.read_bytes() == before


def test_collate_masks():
    b = collate([ParallelPair([4, 5, 6], [7]), ParallelPair([4], [5, 6])])
    assert b.src.tolist() == [[4, 5, 6], [4, 0, 0]]
    assert b.tgt_mask.tolist() == [[False, True], [False, False]]
    assert b.src_lens.tolist() == [3, 1] and b.tgt_lens.tolist() == [1, 2]


def test_make_batches_cover_epoch_and_repeat():
    train, _, _ = generate_task(TaskSpec(kind="copy", n_train=130, n_valid=0))
    batches = list(make_batches(train, 32, 7))
    assert sum(len(b) for b in batches) == 130
    again = list(make_batches(train, 32, 7))
    assert all((x.src == y.src).all() for x, y in zip(batches, again))
    # no pair truncated: every row keeps its full length
    lens = sorted(int(n) for b in batches for n in b.src_lens)
    assert lens == sorted(len(p.source) for p in train)


def test_batch_stream_resume():
    train, _, _ = generate_task(TaskSpec(kind="copy", n_train=100, n_valid=0))
    s = BatchStream(train, 32, seed=3)
    for _ in range(5):
        next(s)
    state = s.state_dict()
    expected = [next(s).src for _ in range(6)]
    r = BatchStream(train, 32, seed=3)
    r.load_state_dict(state)
    assert all((a == b).all() for a, b in zip(expected, (next(r).src for _ in range(6))))
    assert state["epoch"] == 1


def test_task_vocabulary():
    v = task_vocabulary(10)
    assert v.tokens[:4] == SPECIALS and len(v) == 10
