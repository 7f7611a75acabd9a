"""Instruction-following episodes over synthetic graphs.

Instructions come from a fixed template grammar:

    go <turn> to the <landmark> then <turn> to the <landmark> ... then <turn> and stop at the <landmark>

with one ``<turn> ... <landmark>`` segment per hop of the reference path.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .env import NavGraph, heading, oracle_path

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<bos>", "<eos>")
TURN_WORDS = ("left", "right", "forward", "around")
CONNECTIVES = ("go", "to", "the", "then", "stop", "at", "past", "and")
LANDMARK_WORDS = (
    "kitchen", "sofa", "stairs", "door", "window", "table", "bed", "plant", "painting",
    "fireplace", "bathtub", "sink", "lamp", "rug", "shelf", "piano", "mirror", "desk",
    "closet", "hallway",
)
SPLITS = ("train", "val_seen", "val_unseen")
L_MAX = 40


class EpisodeError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    words: tuple[str, ...]
    n_landmarks: int

    @classmethod
    def default(cls, n_landmarks: int = 20) -> "Vocabulary":
        lms = list(LANDMARK_WORDS[:n_landmarks])
        lms += [f"landmark{i}" for i in range(len(lms), n_landmarks)]
        return cls(RESERVED + TURN_WORDS + CONNECTIVES + tuple(lms), n_landmarks)

    def __post_init__(self):
        if len(set(self.words)) != len(self.words):
            raise ValueError("vocabulary words must be unique")
        if self.words[:4] != RESERVED:
            raise ValueError("reserved ids PAD/UNK/BOS/EOS must be 0..3")
        object.__setattr__(self, "_index", {w: i for i, w in enumerate(self.words)})

    def __len__(self) -> int:
        return len(self.words)

    def id(self, word: str) -> int:
        return self._index.get(word, UNK)

    def word(self, idx: int) -> str:
        return self.words[idx]

    def landmark_id(self, tag: int) -> int:
        return len(self.words) - self.n_landmarks + tag

    def landmark_tag(self, token: int) -> int | None:
        tag = token - (len(self.words) - self.n_landmarks)
        return tag if 0 <= tag < self.n_landmarks else None

    def encode(self, text: str) -> list[int]:
        return [BOS] + [self.id(w) for w in text.split()] + [EOS]

    def decode(self, ids) -> str:
        return " ".join(self.words[i] for i in ids if i not in (PAD, BOS, EOS))

    def to_json(self) -> dict:
        return {"words": list(self.words), "n_landmarks": self.n_landmarks}

    @classmethod
    def from_json(cls, d: dict) -> "Vocabulary":
        return cls(tuple(d["words"]), int(d["n_landmarks"]))


@dataclass(frozen=True)
class Episode:
    episode_id: str
    graph_id: str
    start: int
    goal: int
    reference_path: tuple[int, ...]
    instruction: tuple[int, ...]
    split: str = "train"

    @property
    def hops(self) -> int:
        return len(self.reference_path) - 1

    def validate(self, g: NavGraph) -> None:
        path = self.reference_path
        if path[0] != self.start or path[-1] != self.goal:
            raise EpisodeError(f"{self.episode_id}: reference path endpoints mismatch")
        length = 0.0
        for a, b in zip(path, path[1:]):
            if b not in g.directions[a]:
                raise EpisodeError(f"{self.episode_id}: nodes {a},{b} not adjacent")
            length += g.weight(a, b)
        if abs(length - g.distances_from(self.start)[self.goal]) > 1e-9:
            raise EpisodeError(f"{self.episode_id}: reference path is not a shortest path")
        if not 1 <= len(self.instruction) <= L_MAX:
            raise EpisodeError(f"{self.episode_id}: instruction length {len(self.instruction)}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["reference_path"] = list(self.reference_path)
        d["instruction"] = list(self.instruction)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Episode":
        return cls(d["episode_id"], d["graph_id"], int(d["start"]), int(d["goal"]),
                   tuple(d["reference_path"]), tuple(d["instruction"]), d.get("split", "train"))


def turn_word(delta: float) -> str:
    """Map a signed heading change (radians, counter-clockwise positive) to a word."""
    delta = (delta + math.pi) % (2 * math.pi) - math.pi
    a = abs(math.degrees(delta))
    if a < 45.0:
        return "forward"
    if a > 135.0:
        return "around"
    return "left" if delta > 0 else "right"


def instruction_words(g: NavGraph, path, vocab: Vocabulary) -> list[str]:
    """Template instruction for ``path``; the first hop's turn is relative to east."""
    words = ["go"]
    prev = 0.0
    hops = len(path) - 1
    for i in range(1, hops + 1):
        h = heading(g.coords[path[i - 1]], g.coords[path[i]])
        turn = turn_word(h - prev)
        prev = h
        lm = vocab.word(vocab.landmark_id(g.landmarks[path[i]]))
        if i > 1:
            words.append("then")
        if i == hops:
            words += [turn, "and", "stop", "at", "the", lm]
        else:
            words += [turn, "to", "the", lm]
    return words


def parse_instruction(tokens, vocab: Vocabulary) -> list[tuple[str, int]]:
    """Recover the (turn word, landmark tag) sequence from a template instruction."""
    words = [vocab.word(t) for t in tokens if t not in (PAD, BOS, EOS)]
    out = []
    i = 0
    if not words or words[0] != "go":
        raise EpisodeError("instruction does not start with 'go'")
    i = 1
    while i < len(words):
        if words[i] == "then":
            i += 1
        turn = words[i]
        if turn not in TURN_WORDS:
            raise EpisodeError(f"expected a turn word at position {i}, got {turn!r}")
        if words[i + 1:i + 3] == ["to", "the"]:
            lm = words[i + 3]
            i += 4
        elif words[i + 1:i + 5] == ["and", "stop", "at", "the"]:
            lm = words[i + 5]
            i += 6
            if i != len(words):
                raise EpisodeError("tokens after the stop clause")
        else:
            raise EpisodeError(f"unparseable segment at position {i}")
        tag = vocab.landmark_tag(vocab.id(lm))
        if tag is None:
            raise EpisodeError(f"{lm!r} is not a landmark word")
        out.append((turn, tag))
    return out


def generate_episode(g: NavGraph, rng: np.random.Generator, min_hops: int = 3, max_hops: int = 7,
                     vocab: Vocabulary | None = None, episode_id: str = "ep",
                     split: str = "train", exclude: set | None = None,
                     max_tries: int = 200) -> Episode:
    """Sample a (start, goal) pair whose shortest path has min_hops..max_hops edges."""
    vocab = vocab or Vocabulary.default()
    if min_hops < 1 or max_hops < min_hops:
        raise ValueError("need 1 <= min_hops <= max_hops")
    for _ in range(max_tries):
        start = int(rng.integers(g.n_nodes))
        goals = []
        for goal in range(g.n_nodes):
            if goal == start or (exclude and (g.graph_id, start, goal) in exclude):
                continue
            hops = len(oracle_path(g, start, goal)) - 1
            if min_hops <= hops <= max_hops:
                goals.append(goal)
        if goals:
            goal = goals[int(rng.integers(len(goals)))]
            path = oracle_path(g, start, goal)
            tokens = vocab.encode(" ".join(instruction_words(g, path, vocab)))
            ep = Episode(episode_id, g.graph_id, start, goal, tuple(path), tuple(tokens), split)
            ep.validate(g)
            return ep
    raise EpisodeError(f"no admissible (start, goal) pair in {g.graph_id} for hops "
                       f"[{min_hops}, {max_hops}] after {max_tries} tries")


@dataclass
class Dataset:
    vocab: Vocabulary
    episodes: dict[str, list[Episode]] = field(default_factory=dict)

    def split(self, name: str) -> list[Episode]:
        return self.episodes.get(name, [])

    def all(self) -> list[Episode]:
        return [e for s in SPLITS for e in self.split(s)]

    def save(self, path, vocab_path=None) -> None:
        path = Path(path)
        lines = [json.dumps(e.to_json(), sort_keys=True) for e in self.all()]
        path.write_text("\n".join(lines) + "\n")
        vocab_path = Path(vocab_path) if vocab_path else path.with_name("vocab.json")
        vocab_path.write_text(json.dumps(self.vocab.to_json(), sort_keys=True))

    @classmethod
    def load(cls, path, vocab_path=None) -> "Dataset":
        path = Path(path)
        vocab_path = Path(vocab_path) if vocab_path else path.with_name("vocab.json")
        vocab = Vocabulary.from_json(json.loads(vocab_path.read_text()))
        ds = cls(vocab, {s: [] for s in SPLITS})
        for line in path.read_text().splitlines():
            if line.strip():
                e = Episode.from_json(json.loads(line))
                ds.episodes.setdefault(e.split, []).append(e)
        return ds


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def build_dataset(graphs: list[NavGraph], counts: dict[str, int], rng: np.random.Generator,
                  n_unseen: int = 1, min_hops: int = 3, max_hops: int = 7,
                  vocab: Vocabulary | None = None) -> Dataset:
    """Split episodes into train / val_seen (train graphs) / val_unseen (held-out graphs).

    The last ``n_unseen`` graphs are held out.  No (graph, start, goal) triple
    appears twice anywhere in the dataset.
    """
    if len(graphs) < 2:
        raise EpisodeError("build_dataset needs at least 2 graphs")
    if not 1 <= n_unseen < len(graphs):
        raise EpisodeError(f"n_unseen={n_unseen} leaves no training graphs")
    vocab = vocab or Vocabulary.default()
    train_graphs, unseen_graphs = graphs[:-n_unseen], graphs[-n_unseen:]
    used: set = set()
    ds = Dataset(vocab, {s: [] for s in SPLITS})
    for split in SPLITS:
        pool = unseen_graphs if split == "val_unseen" else train_graphs
        for i in range(counts.get(split, 0)):
            g = pool[i % len(pool)]
            ep = generate_episode(g, rng, min_hops, max_hops, vocab, f"{split}_{i:05d}", split, used)
            used.add((g.graph_id, ep.start, ep.goal))
            ds.episodes[split].append(ep)
    return ds
