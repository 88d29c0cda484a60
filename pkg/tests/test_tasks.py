"""Dataset generators, vocabulary files, and the two dataset formats."""

import struct

import numpy as np
import pytest

from s2sdm.errors import ParseError, UsageError
from s2sdm.seqmodel import N_RESERVED, TokenSeq, VecSeq, Vocab
from s2sdm.tasks import (
    TaskSpec,
    derive_target,
    generate,
    read_cont_dataset,
    read_dataset,
    read_vocab,
    write_cont_dataset,
    write_dataset,
    write_vocab,
)


def small_spec(kind="copy", **kw):
    base = dict(vocab_size=6, min_len=1, max_len=4, noise=0.0,
                n_train=30, n_dev=8, n_test=8, seed=5)
    base.update(kw)
    return TaskSpec(kind, **base)


# ---------------------------------------------------------------------------
# spec validation


@pytest.mark.parametrize("kwargs", [
    dict(kind="sort"),
    dict(kind="copy", vocab_size=0),
    dict(kind="copy", min_len=0),
    dict(kind="copy", min_len=5, max_len=4),
    dict(kind="copy", max_len=99),
    dict(kind="copy", noise=0.6),
    dict(kind="copy", noise=-0.1),
    dict(kind="copy", vocab_size=1, noise=0.1),
    dict(kind="copy", n_dev=-1),
    dict(kind="copy", n_train=0, n_dev=0, n_test=0),
    dict(kind="cont_label", source_dim=0),
    dict(kind="cont_label", jitter=-1.0),
])
def test_spec_rejects_bad_values(kwargs):
    with pytest.raises(UsageError):
        TaskSpec(**kwargs)


# ---------------------------------------------------------------------------
# generation semantics


def test_copy_without_noise_is_identity():
    data = generate(small_spec())
    assert all(src == tgt for split in data.splits().values()
               for src, tgt in split)


def test_same_seed_reproduces_the_dataset():
    spec = small_spec("cipher", noise=0.2, seed=11)
    a, b = generate(spec), generate(spec)
    assert np.array_equal(a.cipher_perm, b.cipher_perm)
    for name in ("train", "dev", "test"):
        assert a.splits()[name] == b.splits()[name]


def test_different_seeds_differ():
    a = generate(small_spec(seed=1))
    b = generate(small_spec(seed=2))
    assert a.train != b.train


def test_cipher_with_identity_permutation_is_copy():
    identity = np.arange(6)
    for ids in [(3,), (4, 5, 8), (7, 7, 3, 6)]:
        src = TokenSeq(ids)
        assert derive_target("cipher", src, identity) == derive_target("copy", src)


def test_cipher_targets_apply_one_fixed_permutation():
    data = generate(small_spec("cipher"))
    perm = data.cipher_perm
    assert sorted(perm) == list(range(6))
    for src, tgt in data.train:
        assert tgt.ids == tuple(
            N_RESERVED + int(perm[t - N_RESERVED]) for t in src.ids
        )


def test_reverse_targets_reverse_the_clean_source():
    data = generate(small_spec("reverse"))
    assert all(tgt.ids == src.ids[::-1] for src, tgt in data.train)


def test_derive_target_validates_inputs():
    with pytest.raises(UsageError):
        derive_target("cipher", TokenSeq((3,)))
    with pytest.raises(UsageError):
        derive_target("sort", TokenSeq((3,)))


def test_splits_are_disjoint_under_noise():
    data = generate(small_spec("copy", noise=0.2, n_train=60, n_dev=20,
                               n_test=20, min_len=2, max_len=5))
    keys = [tgt.key() for split in data.splits().values() for _, tgt in split]
    # targets are the clean sources, drawn without replacement
    assert len(set(keys)) == len(keys) == 100


def test_vocabulary_closure():
    data = generate(small_spec("cipher", noise=0.3))
    content = set(data.vocab.content_ids)
    for src, tgt in data.train + data.dev + data.test:
        assert set(src.ids) <= content and set(tgt.ids) <= content


def test_noise_rate_concentrates_around_nominal():
    data = generate(TaskSpec("copy", vocab_size=12, noise=0.1, n_train=500,
                             n_dev=0, n_test=0, seed=3))
    flips = total = 0
    for src, tgt in data.train:
        flips += sum(a != b for a, b in zip(src.ids, tgt.ids))
        total += len(tgt.ids)
    assert 0.07 < flips / total < 0.13


def test_oversized_request_is_rejected():
    with pytest.raises(UsageError):
        generate(TaskSpec("copy", vocab_size=2, min_len=1, max_len=1,
                          noise=0.0, n_train=3, n_dev=0, n_test=0))


def test_cont_label_sources_cluster_near_their_class_prototypes():
    data = generate(small_spec("cont_label", min_len=2, max_len=5,
                               jitter=0.05, source_dim=8))
    for src, tgt in data.train:
        assert isinstance(src, VecSeq)
        assert src.vectors.shape == (len(tgt.ids), 8)
        dists = np.linalg.norm(
            data.prototypes[None, :, :] - src.vectors[:, None, :], axis=2
        )
        nearest = N_RESERVED + dists.argmin(axis=1)
        assert tuple(nearest) == tgt.ids


def test_cont_label_noise_moves_some_positions_off_class():
    data = generate(small_spec("cont_label", noise=0.4, jitter=0.05,
                               min_len=3, max_len=6, n_train=50))
    mismatched = 0
    for src, tgt in data.train:
        dists = np.linalg.norm(
            data.prototypes[None, :, :] - src.vectors[:, None, :], axis=2
        )
        nearest = N_RESERVED + dists.argmin(axis=1)
        mismatched += sum(int(n) != t for n, t in zip(nearest, tgt.ids))
    assert mismatched > 0


# ---------------------------------------------------------------------------
# vocabulary files


def test_vocab_file_round_trip(tmp_path):
    vocab = Vocab.make(7, prefix="tok")
    path = tmp_path / "vocab.txt"
    write_vocab(vocab, path)
    lines = path.read_text().splitlines()
    assert lines[:3] == ["<bos>", "<eos>", "<pad>"]  # line number = id
    assert read_vocab(path) == vocab


@pytest.mark.parametrize("content,fragment", [
    ("<bos>\n<eos>\n<pad>\na\n\nb\n", ":5:"),
    ("<bos>\n<eos>\n<pad>\na\na\n", "duplicate"),
    ("<bos>\n<eos>\n<pad>\n", "3 reserved"),
    ("<bos>\n<eos>\n<pad>\na b\n", "malformed"),
])
def test_vocab_file_errors_carry_the_line(tmp_path, content, fragment):
    path = tmp_path / "vocab.txt"
    path.write_text(content)
    with pytest.raises(ParseError, match=fragment):
        read_vocab(path)


# ---------------------------------------------------------------------------
# discrete dataset files


def test_dataset_file_round_trip(tmp_path):
    data = generate(small_spec("reverse", noise=0.1))
    path = tmp_path / "train.tsv"
    write_dataset(data.train, path, data.vocab)
    assert read_dataset(path, data.vocab) == data.train


def test_empty_dataset_round_trips(tmp_path):
    path = tmp_path / "empty.tsv"
    write_dataset([], path, Vocab.make(2))
    assert read_dataset(path, Vocab.make(2)) == []


def test_dataset_write_rejects_unterminated_sequences(tmp_path):
    capped = [(TokenSeq((3,)), TokenSeq((4,), False))]
    with pytest.raises(UsageError):
        write_dataset(capped, tmp_path / "x.tsv", Vocab.make(2))


def test_dataset_read_reports_unknown_token_with_line(tmp_path):
    vocab = Vocab.make(3)
    path = tmp_path / "bad.tsv"
    path.write_text("w0 w1\tw2\nw0 bogus\tw1\n")
    with pytest.raises(ParseError, match=r":2: token 'bogus'"):
        read_dataset(path, vocab)


@pytest.mark.parametrize("line,fragment", [
    ("w0 w1 w2", "TAB"),
    ("w0\tw1\tw2", "TAB"),
    ("<bos> w0\tw1", "reserved"),
])
def test_dataset_read_rejects_malformed_lines(tmp_path, line, fragment):
    path = tmp_path / "bad.tsv"
    path.write_text(line + "\n")
    with pytest.raises(ParseError, match=fragment):
        read_dataset(path, Vocab.make(3))


# ---------------------------------------------------------------------------
# continuous dataset files


def test_cont_dataset_round_trip_is_bitwise(tmp_path):
    data = generate(small_spec("cont_label", min_len=2, max_len=5))
    path = tmp_path / "train.vseq"
    write_cont_dataset(data.train, path)
    back = read_cont_dataset(path)
    assert len(back) == len(data.train)
    for (src_a, tgt_a), (src_b, tgt_b) in zip(back, data.train):
        assert np.array_equal(src_a.vectors, src_b.vectors)
        assert tgt_a == tgt_b


def test_cont_dataset_empty_round_trip(tmp_path):
    path = tmp_path / "empty.vseq"
    write_cont_dataset([], path)
    assert read_cont_dataset(path) == []


def test_cont_dataset_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.vseq"
    path.write_bytes(b"NOTVSEQ!")
    with pytest.raises(ParseError, match="magic"):
        read_cont_dataset(path)


def test_cont_dataset_reports_truncated_record(tmp_path):
    data = [(VecSeq(np.ones((2, 3))), TokenSeq((3, 4)))]
    path = tmp_path / "cut.vseq"
    write_cont_dataset(data, path)
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(ParseError, match="record 0 truncated"):
        read_cont_dataset(path)


def test_cont_dataset_rejects_bad_shapes_and_ids(tmp_path):
    path = tmp_path / "bad.vseq"
    path.write_bytes(b"VSEQ0001" + struct.pack("<ii", 0, 4))
    with pytest.raises(ParseError, match="shape"):
        read_cont_dataset(path)
    body = (struct.pack("<ii", 1, 1) + struct.pack("<d", 0.5)
            + struct.pack("<i", 1) + struct.pack("<i", 1))  # reserved id
    path.write_bytes(b"VSEQ0001" + body)
    with pytest.raises(ParseError, match="record 0"):
        read_cont_dataset(path)
