import math

import numpy as np
import pytest

from cmgnav.env import generate_graph, make_graph, shortest_distance
from cmgnav.episodes import (BOS, EOS, L_MAX, PAD, UNK, Dataset, Episode, EpisodeError, Vocabulary,
                             build_dataset, generate_episode, instruction_words, parse_instruction,
                             turn_word)

VOCAB = Vocabulary.default()


def l_shape():
    # east, east, then north: a 90 degree left turn at node 2
    return make_graph([[0, 0], [2, 0], [4, 0], [4, 2]], [(0, 1), (1, 2), (2, 3)], landmarks=[0, 1, 2, 3])


def graphs(n, seed=0, nodes=25):
    rng = np.random.default_rng(seed)
    return [generate_graph(nodes, 4, 8, rng, graph_id=f"env_{i:03d}") for i in range(n)]


# -- vocabulary ----------------------------------------------------------------------------------

def test_vocabulary_reserved_and_bijective():
    assert VOCAB.words[:4] == ("<pad>", "<unk>", "<bos>", "<eos>")
    assert (PAD, UNK, BOS, EOS) == (0, 1, 2, 3)
    assert len(VOCAB) >= 12
    assert all(VOCAB.id(VOCAB.word(i)) == i for i in range(len(VOCAB)))
    assert VOCAB.id("zebra") == UNK
    for w in ("left", "right", "forward", "around", "go", "to", "the", "then", "stop", "at", "past", "and"):
        assert VOCAB.id(w) != UNK


def test_vocabulary_json_round_trip():
    assert Vocabulary.from_json(VOCAB.to_json()) == VOCAB


def test_landmark_ids_round_trip():
    for tag in range(VOCAB.n_landmarks):
        assert VOCAB.landmark_tag(VOCAB.landmark_id(tag)) == tag
    assert VOCAB.landmark_tag(VOCAB.id("left")) is None


# -- turn words --------------------------------------------------------------------------------------

@pytest.mark.parametrize("deg,word", [(0, "forward"), (44, "forward"), (-44, "forward"), (90, "left"),
                                      (-90, "right"), (136, "around"), (-170, "around"), (270, "right"),
                                      (-270, "left")])
def test_turn_word(deg, word):
    assert turn_word(math.radians(deg)) == word


def test_l_shape_left_turn():
    g = l_shape()
    words = instruction_words(g, [0, 1, 2, 3], VOCAB)
    lm = [VOCAB.word(VOCAB.landmark_id(t)) for t in (1, 2, 3)]
    assert words == ["go", "forward", "to", "the", lm[0], "then", "forward", "to", "the", lm[1],
                     "then", "left", "and", "stop", "at", "the", lm[2]]


def test_l_shape_generated_episode_mentions_left():
    g = l_shape()
    for seed in range(20):
        ep = generate_episode(g, np.random.default_rng(seed), 3, 3, VOCAB)
        if ep.start == 0:
            assert VOCAB.id("left") in ep.instruction
            return
    pytest.fail("no episode started at node 0")


# -- episode generation -----------------------------------------------------------------------------

def test_single_hop_mentions_only_goal_landmark():
    g = graphs(1)[0]
    for seed in range(10):
        ep = generate_episode(g, np.random.default_rng(seed), 1, 1, VOCAB)
        tags = [VOCAB.landmark_tag(t) for t in ep.instruction if VOCAB.landmark_tag(t) is not None]
        assert tags == [g.landmarks[ep.goal]]


@pytest.mark.parametrize("seed", range(10))
def test_episode_invariants(seed):
    g = graphs(1, seed)[0]
    ep = generate_episode(g, np.random.default_rng(seed), 3, 7, VOCAB)
    ep.validate(g)
    assert 3 <= ep.hops <= 7
    assert ep.reference_path[0] == ep.start and ep.reference_path[-1] == ep.goal
    length = sum(g.weight(a, b) for a, b in zip(ep.reference_path, ep.reference_path[1:]))
    assert length == pytest.approx(shortest_distance(g, ep.start, ep.goal), abs=1e-9)
    assert ep.instruction[0] == BOS and ep.instruction[-1] == EOS
    assert len(ep.instruction) <= L_MAX


def test_longest_template_fits_l_max():
    # 7 hops: go + 7 (turn, 3 words) + 6 "then" + stop clause extras + BOS/EOS
    g = make_graph([[2 * i, 0] for i in range(8)], [(i, i + 1) for i in range(7)])
    ep = generate_episode(g, np.random.default_rng(0), 7, 7, VOCAB)
    assert len(ep.instruction) == 39 <= L_MAX


def test_parse_back_recovers_landmarks():
    for g in graphs(3, seed=4):
        rng = np.random.default_rng(1)
        for _ in range(20):
            ep = generate_episode(g, rng, 3, 7, VOCAB)
            parsed = parse_instruction(ep.instruction, VOCAB)
            assert [tag for _, tag in parsed] == [g.landmarks[n] for n in ep.reference_path[1:]]


def test_parse_rejects_garbage():
    with pytest.raises(EpisodeError):
        parse_instruction(VOCAB.encode("stop at the sofa"), VOCAB)
    with pytest.raises(EpisodeError):
        parse_instruction(VOCAB.encode("go left to the left"), VOCAB)


def test_instruction_determinism():
    g = graphs(1, 5)[0]
    a = generate_episode(g, np.random.default_rng(9), 3, 7, VOCAB)
    b = generate_episode(g, np.random.default_rng(9), 3, 7, VOCAB)
    assert a == b


def test_no_admissible_pair():
    g = make_graph([[0, 0], [1, 0], [2, 0]], [(0, 1), (1, 2)])
    with pytest.raises(EpisodeError):
        generate_episode(g, np.random.default_rng(0), 3, 7, VOCAB, max_tries=5)


def test_episode_json_round_trip():
    g = graphs(1)[0]
    ep = generate_episode(g, np.random.default_rng(0), 3, 7, VOCAB, split="val_seen")
    assert Episode.from_json(ep.to_json()) == ep


# -- datasets ----------------------------------------------------------------------------------------

def test_split_contract():
    gs = graphs(2, seed=2)
    ds = build_dataset(gs, {"train": 10, "val_seen": 5, "val_unseen": 5}, np.random.default_rng(0))
    assert {e.graph_id for e in ds.split("val_unseen")} == {gs[1].graph_id}
    assert {e.graph_id for e in ds.split("train") + ds.split("val_seen")} == {gs[0].graph_id}
    assert [len(ds.split(s)) for s in ("train", "val_seen", "val_unseen")] == [10, 5, 5]


def test_no_triple_repeats():
    gs = graphs(3, seed=3)
    ds = build_dataset(gs, {"train": 60, "val_seen": 20, "val_unseen": 20}, np.random.default_rng(0))
    triples = [(e.graph_id, e.start, e.goal) for e in ds.all()]
    assert len(triples) == len(set(triples))


def test_every_train_landmark_word_appears():
    from cmgnav.bench import BenchConfig, build_benchmark
    ds, gmap = build_benchmark(0, BenchConfig())
    train_ids = {e.graph_id for e in ds.split("train")}
    tags = {t for gid in train_ids for t in gmap[gid].landmarks}
    seen = {VOCAB.landmark_tag(t) for e in ds.split("train") for t in e.instruction} - {None}
    assert tags <= seen


def test_insufficient_graphs():
    with pytest.raises(EpisodeError):
        build_dataset(graphs(1), {"train": 5}, np.random.default_rng(0))
    with pytest.raises(EpisodeError):
        build_dataset(graphs(2), {"train": 5}, np.random.default_rng(0), n_unseen=2)


def test_dataset_save_load(tmp_path):
    ds = build_dataset(graphs(2), {"train": 8, "val_seen": 3, "val_unseen": 3}, np.random.default_rng(0))
    ds.save(tmp_path / "episodes.jsonl")
    back = Dataset.load(tmp_path / "episodes.jsonl")
    assert back.vocab == ds.vocab
    for s in ("train", "val_seen", "val_unseen"):
        assert back.split(s) == ds.split(s)
