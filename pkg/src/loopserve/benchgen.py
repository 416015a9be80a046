"""Multi-turn long-context instance generation.

Instances follow two diversity requirements: the query of a turn may sit at
the begin, middle, or end of that turn's context segments, and the answer of
turn j may depend on context planted in any nonempty subset of turns 1..j.
Generators consume local JSONL corpora; a synthetic corpus factory with
planted answers makes the repository self-testing without external data.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import PoolTooSmall, TooFewExamples

POSITIONS = ("begin", "middle", "end")
TASKS = ("qa", "summarization", "fewshot")

_PARAGRAPH_SPLIT = re.compile(r"\n\s*\n")


@dataclass
class Turn:
    context_segments: list[str]
    segment_sources: list[str]
    query: str
    query_index: int
    query_position: str
    reference_answer: str
    relevance: list[int]

    def to_json(self) -> dict:
        return {
            "context_segments": self.context_segments,
            "segment_sources": self.segment_sources,
            "query": self.query,
            "query_index": self.query_index,
            "query_position": self.query_position,
            "reference_answer": self.reference_answer,
            "relevance": self.relevance,
        }

    @staticmethod
    def from_json(doc: dict) -> "Turn":
        return Turn(
            context_segments=list(doc["context_segments"]),
            segment_sources=list(doc["segment_sources"]),
            query=doc["query"],
            query_index=int(doc["query_index"]),
            query_position=doc["query_position"],
            reference_answer=doc["reference_answer"],
            relevance=[int(x) for x in doc["relevance"]],
        )


@dataclass
class DialogueInstance:
    id: str
    task: str
    turns: list[Turn]

    def to_json(self) -> dict:
        return {"id": self.id, "task": self.task, "turns": [t.to_json() for t in self.turns]}

    @staticmethod
    def from_json(doc: dict) -> "DialogueInstance":
        return DialogueInstance(
            id=doc["id"], task=doc["task"], turns=[Turn.from_json(t) for t in doc["turns"]]
        )


def render_turn(turn: Turn) -> str:
    """The turn's input text: context segments with the query spliced in at
    its recorded index."""
    parts = list(turn.context_segments)
    parts.insert(turn.query_index, turn.query)
    return "\n\n".join(parts)


@dataclass
class ValidationReport:
    ok: bool
    violations: list[str] = field(default_factory=list)


def validate_instance(instance: DialogueInstance) -> ValidationReport:
    """Check the diversity invariants: position labels must match the actual
    splice point and relevance must be a nonempty subset of prior turns."""
    v: list[str] = []
    if not instance.id:
        v.append("instance id is empty")
    if instance.task not in TASKS:
        v.append(f"unknown task {instance.task!r}")
    if not instance.turns:
        v.append("instance has no turns")
    for j, turn in enumerate(instance.turns, start=1):
        where = f"turn {j}"
        n_seg = len(turn.context_segments)
        if n_seg == 0:
            v.append(f"{where}: no context segments")
        if len(turn.segment_sources) != n_seg:
            v.append(f"{where}: segment_sources length differs from segments")
        if not turn.query.strip():
            v.append(f"{where}: empty query")
        if not turn.reference_answer.strip():
            v.append(f"{where}: empty reference answer")
        qi = turn.query_index
        if not (0 <= qi <= n_seg):
            v.append(f"{where}: query_index {qi} outside [0, {n_seg}]")
        else:
            expected = "begin" if qi == 0 else ("end" if qi == n_seg else "middle")
            if turn.query_position != expected:
                v.append(
                    f"{where}: position label {turn.query_position!r} but query "
                    f"sits at index {qi} of {n_seg} segments ({expected})"
                )
        rel = turn.relevance
        if not rel:
            v.append(f"{where}: relevance is empty")
        elif sorted(set(rel)) != rel:
            v.append(f"{where}: relevance must be sorted and unique")
        elif rel[0] < 1 or rel[-1] > j:
            v.append(f"{where}: relevance {rel} outside 1..{j}")
    return ValidationReport(ok=not v, violations=v)


def split_paragraphs(text: str) -> list[str]:
    return [p.strip() for p in _PARAGRAPH_SPLIT.split(text) if p.strip()]


def _query_index(rng, position: str, n_segments: int) -> int:
    if position == "begin":
        return 0
    if position == "end":
        return n_segments
    if position == "middle":
        if n_segments < 2:
            raise ValueError("middle placement needs at least two segments")
        return int(rng.integers(1, n_segments))
    raise ValueError(f"unknown position {position!r}")


def _ensure_splittable(segments: list[str], sources: list[str]) -> None:
    """Middle placement needs two segments; split the longest one by words."""
    if len(segments) >= 2:
        return
    words = segments[0].split()
    half = max(1, len(words) // 2)
    src = sources[0]
    segments[:] = [" ".join(words[:half]), " ".join(words[half:]) or words[-1]]
    sources[:] = [src + ":a", src + ":b"]


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def build_qa_instance(
    qa_pool: list[dict],
    n_turns: int,
    positions: list[str] | None,
    noise_pool: list[str],
    seed: int,
    instance_id: str = "qa-0",
) -> DialogueInstance:
    """One QA instance: each turn carries a question whose supporting
    paragraphs are scattered over a random subset of turns 1..j, diluted with
    irrelevant paragraphs from the noise pool."""
    if len(qa_pool) < n_turns:
        raise PoolTooSmall(f"need {n_turns} QA records, pool has {len(qa_pool)}")
    rng = _rng(seed)
    if positions is None:
        positions = [str(rng.choice(POSITIONS)) for _ in range(n_turns)]
    if len(positions) != n_turns:
        raise ValueError("one query position is required per turn")
    chosen = [qa_pool[int(i)] for i in rng.choice(len(qa_pool), size=n_turns, replace=False)]

    segments: list[list[str]] = [[] for _ in range(n_turns)]
    sources: list[list[str]] = [[] for _ in range(n_turns)]
    relevance: list[list[int]] = [[] for _ in range(n_turns)]
    for t in range(1, n_turns + 1):
        paragraphs = split_paragraphs(chosen[t - 1]["context"])
        k = int(rng.integers(1, min(t, len(paragraphs)) + 1))
        targets = sorted(int(x) + 1 for x in rng.choice(t, size=k, replace=False))
        relevance[t - 1] = targets
        bounds = np.linspace(0, len(paragraphs), k + 1).astype(int)
        for chunk_idx, target in enumerate(targets):
            for p in range(bounds[chunk_idx], bounds[chunk_idx + 1]):
                segments[target - 1].append(paragraphs[p])
                sources[target - 1].append(f"qa{t}:p{p}")

    turns: list[Turn] = []
    for t in range(1, n_turns + 1):
        seg, src = segments[t - 1], sources[t - 1]
        if noise_pool:
            for _ in range(int(rng.integers(1, 3))):
                at = int(rng.integers(0, len(seg) + 1))
                seg.insert(at, noise_pool[int(rng.integers(0, len(noise_pool)))])
                src.insert(at, "noise")
        if positions[t - 1] == "middle":
            _ensure_splittable(seg, src)
        turns.append(
            Turn(
                context_segments=seg,
                segment_sources=src,
                query=chosen[t - 1]["question"],
                query_index=_query_index(rng, positions[t - 1], len(seg)),
                query_position=positions[t - 1],
                reference_answer=chosen[t - 1]["answer"],
                relevance=relevance[t - 1],
            )
        )
    return DialogueInstance(id=instance_id, task="qa", turns=turns)


def build_sum_instance(
    doc_pool: list[dict],
    seed: int,
    positions: list[str] | None = None,
    noise_pool: list[str] | None = None,
    instance_id: str = "sum-0",
) -> DialogueInstance:
    """Two-turn summarization instance. The first document lands entirely in
    turn 1; the second is split across both turns, so its summary depends on
    both. Every segment is annotated with its source paragraph."""
    if len(doc_pool) < 2:
        raise PoolTooSmall(f"need 2 documents, pool has {len(doc_pool)}")
    rng = _rng(seed)
    if positions is None:
        positions = [str(rng.choice(POSITIONS)) for _ in range(2)]
    a, b = (doc_pool[int(i)] for i in rng.choice(len(doc_pool), size=2, replace=False))
    pa = split_paragraphs(a["document"])
    pb = split_paragraphs(b["document"])
    cut = max(1, len(pb) // 2) if len(pb) >= 2 else 0

    seg1 = list(pa) + pb[:cut]
    src1 = [f"doc1:p{i}" for i in range(len(pa))] + [f"doc2:p{i}" for i in range(cut)]
    seg2 = pb[cut:]
    src2 = [f"doc2:p{i}" for i in range(cut, len(pb))]
    noise_pool = noise_pool or []
    for seg, src in ((seg1, src1), (seg2, src2)):
        if noise_pool:
            at = int(rng.integers(0, len(seg) + 1))
            seg.insert(at, noise_pool[int(rng.integers(0, len(noise_pool)))])
            src.insert(at, "noise")

    turns = []
    for t, (seg, src, doc, rel, query) in enumerate(
        [
            (seg1, src1, a, [1], "summarize document one"),
            (seg2, src2, b, [1, 2] if cut > 0 else [2], "summarize document two"),
        ],
        start=1,
    ):
        if positions[t - 1] == "middle":
            _ensure_splittable(seg, src)
        turns.append(
            Turn(
                context_segments=seg,
                segment_sources=src,
                query=query,
                query_index=_query_index(rng, positions[t - 1], len(seg)),
                query_position=positions[t - 1],
                reference_answer=doc["summary"],
                relevance=rel,
            )
        )
    return DialogueInstance(id=instance_id, task="summarization", turns=turns)


def build_fewshot_instance(
    example_record: dict,
    seed: int,
    positions: list[str] | None = None,
    instance_id: str = "fewshot-0",
) -> DialogueInstance:
    """Two-turn few-shot instance: demonstrations split across the turns with
    their boundaries kept intact, the same query asked in both."""
    examples = list(example_record["examples"])
    if len(examples) < 4:
        raise TooFewExamples(f"need at least 4 examples, got {len(examples)}")
    rng = _rng(seed)
    if positions is None:
        positions = [str(rng.choice(POSITIONS)) for _ in range(2)]
    cut = int(rng.integers(2, len(examples) - 1))
    splits = [(examples[:cut], 0), (examples[cut:], cut)]
    turns = []
    for t, (exs, base) in enumerate(splits, start=1):
        seg = list(exs)
        src = [f"ex{base + i}" for i in range(len(exs))]
        if positions[t - 1] == "middle":
            _ensure_splittable(seg, src)
        turns.append(
            Turn(
                context_segments=seg,
                segment_sources=src,
                query=example_record["question"],
                query_index=_query_index(rng, positions[t - 1], len(seg)),
                query_position=positions[t - 1],
                reference_answer=example_record["answer"],
                relevance=[1] if t == 1 else [1, 2],
            )
        )
    return DialogueInstance(id=instance_id, task="fewshot", turns=turns)


# --- synthetic corpora --------------------------------------------------------

_NAMES = "arden bellis cosmo delia edris fray goran hesta ilka joro kestrel luma".split()
_PLACES = "harbor meadow archive foundry orchard terrace quarry atelier".split()
_THINGS = "lantern ledger compass spindle mosaic beacon pulley chisel".split()
_CODES = "zx41 qm88 rv07 hk23 wd56 pl19 bn62 tc35 gy74 ms90 fj28 kd83".split()
_FILLER = (
    "the {p} keeper polished a {t} before noon",
    "several visitors asked about the old {t} near the {p}",
    "records from the {p} mention a broken {t}",
    "a courier left one {t} at the {p} gate",
)


def _sentence(rng, template=None) -> str:
    t = template or _FILLER[int(rng.integers(0, len(_FILLER)))]
    return t.format(p=_PLACES[int(rng.integers(0, len(_PLACES)))],
                    t=_THINGS[int(rng.integers(0, len(_THINGS)))])


def _paragraph(rng, n_sentences=3) -> str:
    return " . ".join(_sentence(rng) for _ in range(n_sentences))


def make_qa_corpus(count: int, seed: int) -> list[dict]:
    """QA records with a planted single-token answer inside one paragraph."""
    rng = _rng(seed)
    out = []
    for i in range(count):
        name = _NAMES[int(rng.integers(0, len(_NAMES)))]
        code = _CODES[int(rng.integers(0, len(_CODES)))]
        paragraphs = [_paragraph(rng) for _ in range(int(rng.integers(3, 6)))]
        fact = f"the secret code of {name} is {code}"
        slot = int(rng.integers(0, len(paragraphs)))
        paragraphs[slot] = paragraphs[slot] + " . " + fact
        out.append(
            {
                "context": "\n\n".join(paragraphs),
                "question": f"what is the secret code of {name}",
                "answer": code,
            }
        )
    return out


def make_sum_corpus(count: int, seed: int) -> list[dict]:
    """Documents whose summary is the list of per-paragraph topic words."""
    rng = _rng(seed)
    out = []
    for _ in range(count):
        n_par = int(rng.integers(3, 6))
        topics = [ _THINGS[int(rng.integers(0, len(_THINGS)))] for _ in range(n_par)]
        paragraphs = [
            f"section about the {topic} . " + _paragraph(rng, 2) for topic in topics
        ]
        out.append(
            {
                "document": "\n\n".join(paragraphs),
                "summary": "sections about " + " ".join(topics),
            }
        )
    return out


_LABELS = {
    "crimson": "color", "amber": "color", "teal": "color", "ochre": "color",
    "heron": "bird", "plover": "bird", "kite": "bird", "swift": "bird",
    "larch": "tree", "rowan": "tree", "alder": "tree", "aspen": "tree",
}


def make_fewshot_corpus(count: int, seed: int) -> list[dict]:
    """Label-classification records with at least five demonstrations."""
    rng = _rng(seed)
    words = sorted(_LABELS)
    out = []
    for _ in range(count):
        picks = [words[int(i)] for i in rng.choice(len(words), size=6, replace=False)]
        query_word, demos = picks[0], picks[1:]
        out.append(
            {
                "examples": [f"input {w} output {_LABELS[w]}" for w in demos],
                "question": f"input {query_word} output",
                "answer": _LABELS[query_word],
            }
        )
    return out


def make_noise_paragraphs(count: int, seed: int) -> list[str]:
    rng = _rng(seed)
    return [_paragraph(rng) for _ in range(count)]


def corpus_texts(records: list[dict]) -> list[str]:
    """Every text field of a corpus, for vocabulary building."""
    out = []
    for rec in records:
        for key in ("context", "question", "answer", "document", "summary"):
            if key in rec:
                out.append(rec[key])
        for ex in rec.get("examples", []):
            out.append(ex)
    return out


# --- JSONL io -----------------------------------------------------------------


def save_jsonl(records: list[dict], path: str) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_jsonl(path: str) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def save_instances(instances: list[DialogueInstance], path: str) -> None:
    save_jsonl([inst.to_json() for inst in instances], path)


def load_instances(path: str) -> list[DialogueInstance]:
    return [DialogueInstance.from_json(doc) for doc in load_jsonl(path)]
