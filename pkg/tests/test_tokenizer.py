import random

import numpy as np
import pytest

from bittraj.tokenizer import (
    EOS_ID,
    PAD_ID,
    TRAJ_ALPHABET,
    UNK_ID,
    BpeVocab,
    DecodeFailure,
    collate,
    format_points,
    make_example,
    parse_answer,
    parse_trajectory,
    serialize_window,
    train_bpe,
    train_bpe_with_segmentation,
)
from bittraj.trajdata import SYNTH_KINDS, make_windows, synth_scene


@pytest.fixture(scope="module")
def windows():
    out = []
    for i, kind in enumerate(SYNTH_KINDS * 4):
        out += make_windows(synth_scene(kind, n_agents=6, noise_sigma=0.5, seed=i), max_neighbors=2)
    return out


@pytest.fixture(scope="module")
def trained(windows):
    corpus = []
    for w in windows[::5]:
        t = serialize_window(w)
        corpus += [t.prompt, t.answer]
    return corpus, train_bpe_with_segmentation(corpus, 300, TRAJ_ALPHABET)


# -- serialization --------------------------------------------------------------

def test_point_round_trip_at_precision():
    assert parse_answer(format_points([(1.25, -3.50)])) == [(1.25, -3.5)]
    assert format_points([]) == "" and parse_answer("") == []


def test_negative_zero_is_normalized():
    assert format_points([(-0.001, 0.0)]) == "0.00,0.00"


def test_serialize_layout(windows):
    w = windows[0]
    t = serialize_window(w, precision=1, max_neighbors=1)
    assert t.question == f"?0:{len(w.fut)}"
    assert t.context.startswith("0:")
    assert t.prompt == t.question + "|" + t.context
    assert t.context.count("|") == min(1, len(w.neighbors))
    np.testing.assert_allclose(parse_answer(t.answer), np.round(w.fut, 1), atol=1e-9)


@pytest.mark.parametrize("text,reason", [
    ("1.00,2.00;3.00", DecodeFailure.TRUNCATED_PAIR),
    ("1.00,2.00;3.00,", DecodeFailure.TRUNCATED_PAIR),
    ("1.00,x", DecodeFailure.NON_NUMERIC),
    ("1,2,3", DecodeFailure.NON_NUMERIC),
    ("1--2,3", DecodeFailure.NON_NUMERIC),
    (";".join(["1,1"] * 100), DecodeFailure.LENGTH_OVERFLOW),
    ("9" * 5000, DecodeFailure.LENGTH_OVERFLOW),
    (b"\xff\xfe", DecodeFailure.NON_NUMERIC),
])
def test_parse_failures_carry_reason(text, reason):
    with pytest.raises(DecodeFailure) as e:
        parse_answer(text)
    assert e.value.reason == reason


def test_parse_trajectory_horizon():
    assert parse_trajectory("1,2;3,4;5,6", 2).shape == (2, 2)
    with pytest.raises(DecodeFailure) as e:
        parse_trajectory("1,2", 3)
    assert e.value.reason == DecodeFailure.TOO_FEW_POINTS


def test_parse_fuzz_never_raises_anything_else():
    rnd = random.Random(0)
    symbols = list(TRAJ_ALPHABET) + ["a", " ", "\x00", "é"]
    seeds = ["1.00,2.00;3.00,4.00", "12,5;13,6;14,7"]
    for i in range(3000):
        if i % 3 == 0:
            text = "".join(rnd.choice(symbols) for _ in range(rnd.randint(0, 60)))
        elif i % 3 == 1:
            s = list(rnd.choice(seeds))
            for _ in range(rnd.randint(1, 4)):
                s[rnd.randrange(len(s))] = rnd.choice(symbols)
            text = "".join(s)
        else:
            text = bytes(rnd.randrange(256) for _ in range(rnd.randint(0, 40)))
        try:
            pts = parse_answer(text)
        except DecodeFailure:
            continue
        assert all(len(p) == 2 for p in pts)


# -- BPE ----------------------------------------------------------------------

def test_first_merge_on_ababab():
    v = train_bpe(["ababab"], vocab_size=3 + 2 + 1)
    assert v.merges == [("a", "b")]


def test_ties_go_to_smallest_pair():
    # (a,b) and (c,d) both occur twice
    v = train_bpe(["abcd", "abcd"], vocab_size=3 + 4 + 1)
    assert v.merges == [("a", "b")]


def test_alphabet_sized_vocab_has_no_merges():
    v = train_bpe(["12,34;56,78"], vocab_size=3 + len(TRAJ_ALPHABET), alphabet=TRAJ_ALPHABET)
    assert v.merges == [] and v.size == 3 + len(TRAJ_ALPHABET)
    assert v.encode("12") == [v.token_to_id["1"], v.token_to_id["2"]]


def test_training_errors():
    with pytest.raises(ValueError):
        train_bpe([], 50)
    with pytest.raises(ValueError):
        train_bpe(["123"], 4, alphabet=TRAJ_ALPHABET)


def test_stops_when_no_pair_repeats():
    v = train_bpe(["abc"], vocab_size=100)
    assert v.merges == []


def test_replay_matches_training_segmentation(trained):
    _, (vocab, seg) = trained
    assert len(vocab.merges) > 50
    for chunk, parts in seg.items():
        assert vocab.segment(chunk) == parts


def test_ids_dense_and_tokens_unique(trained):
    _, (vocab, _) = trained
    assert sorted(vocab.token_to_id.values()) == list(range(vocab.size))
    assert len(set(vocab.tokens)) == vocab.size
    assert vocab.tokens[PAD_ID] == "<pad>" and vocab.tokens[EOS_ID] == "<eos>" and vocab.tokens[UNK_ID] == "<unk>"


def test_round_trip_and_shrink_on_1000_windows(trained, windows):
    _, (vocab, _) = trained
    rnd = random.Random(1)
    for w in rnd.choices(windows, k=1000):
        t = serialize_window(w)
        for s in (t.prompt, t.answer):
            ids = vocab.encode(s)
            assert vocab.decode(ids) == s
            assert len(ids) <= len(s)
            assert ids == vocab.encode(s)


def test_unknown_symbols_map_to_unk(trained):
    _, (vocab, _) = trained
    ids = vocab.encode("1a2")
    assert ids[1] == UNK_ID
    assert vocab.decode(ids) == "1�2"


def test_vocab_file_round_trip(trained, tmp_path):
    _, (vocab, _) = trained
    p = tmp_path / "vocab.txt"
    vocab.save(p)
    text = p.read_text().splitlines()
    assert text[0] == "#bpe-vocab v1" and text[3] == f"#alphabet {TRAJ_ALPHABET}"
    back = BpeVocab.load(p)
    assert back.merges == vocab.merges and back.tokens == vocab.tokens
    p.write_text("nope\n")
    with pytest.raises(ValueError):
        BpeVocab.load(p)


def test_collate_shifts_decoder_input(trained, windows):
    _, (vocab, _) = trained
    exs = [make_example(vocab, w) for w in windows[:3]]
    src, tgt_in, tgt_out = collate(exs)
    assert src.shape[0] == tgt_in.shape[0] == 3
    assert np.all(tgt_in[:, 0] == PAD_ID)
    for i, e in enumerate(exs):
        n = len(e.tgt)
        assert e.tgt[-1] == EOS_ID and e.src[-1] == EOS_ID
        np.testing.assert_array_equal(tgt_out[i, :n], e.tgt)
        np.testing.assert_array_equal(tgt_in[i, 1:n], e.tgt[:-1])
    assert not np.any(tgt_in == EOS_ID)
