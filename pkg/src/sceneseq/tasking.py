"""Prompt rendering, single-turn task records, loss-mask packing and dataset mixing."""

from __future__ import annotations

import json
import os
import random
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Optional

from sceneseq.identifiers import IdAssignment, make_id_token, parse_id_tokens

SYSTEM_PREAMBLE = (
    "A chat between a curious user and an artificial intelligence assistant. "
    "The assistant gives helpful, detailed, and polite answers to the user's questions. "
)
SCENE_OPEN = "The conversation centers around an indoor scene: ["
SCENE_CLOSE = "]. "
OBJECT_PLACEHOLDER = "<object>"

TASK_KINDS = (
    "grounding_single",
    "grounding_multi",
    "dense_caption",
    "qa",
    "situated_qa",
    "obj_align",
    "obj_caption",
    "scene_caption",
    "cot_qa",
    "cot_grounding",
)

# Training mixture rows (source name, sample count).
TRAINING_MIX = (
    ("ScanRefer", 33_000),
    ("ScanRefer_CoT", 24_000),
    ("Multi3DRefer", 39_000),
    ("Scan2Cap", 33_000),
    ("ScanQA", 26_000),
    ("ScanQA_CoT", 23_000),
    ("SQA3D", 26_000),
    ("ObjAlign", 25_000),
    ("Nr3DCaption", 28_000),
    ("ObjCaption", 24_000),
    ("SceneCaption", 43_000),
)
# Stated total; the rows are rounded to the nearest thousand and sum to 324K.
TRAINING_MIX_REPORTED_TOTAL = 329_000

_REQUIRED = {
    "grounding_single": ("description", "target"),
    "grounding_multi": ("description", "targets"),
    "dense_caption": ("target", "caption"),
    "qa": ("question", "answers"),
    "situated_qa": ("situation", "question", "answers"),
    "obj_align": ("target", "category"),
    "obj_caption": ("target", "caption"),
    "scene_caption": ("caption",),
}


class MissingFieldError(KeyError):
    pass


def load_templates(path=None) -> dict:
    if path is None:
        text = resources.files("sceneseq").joinpath("data/templates.json").read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return json.loads(text)


@dataclass
class TaskRecord:
    record_id: str
    scene_id: str
    task_kind: str
    system_prompt: str
    user_text: str
    assistant_text: str
    target_ids: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False, sort_keys=False)

    @classmethod
    def from_json(cls, line: str) -> "TaskRecord":
        return cls(**json.loads(line))


@dataclass(frozen=True)
class PackedSequence:
    prefix_tokens: tuple
    response_tokens: tuple
    loss_mask: tuple

    @property
    def tokens(self) -> tuple:
        return self.prefix_tokens + self.response_tokens

    @property
    def boundary(self) -> int:
        return len(self.prefix_tokens)


@dataclass(frozen=True)
class ManifestEntry:
    name: str
    path: str
    expected_count: int
    weight: float = 0.0

    def __post_init__(self):
        if self.expected_count < 0:
            raise ValueError(f"{self.name}: expected_count must be >= 0")
        if self.weight == 0.0:
            object.__setattr__(self, "weight", float(max(self.expected_count, 1)))
        if not self.weight > 0:
            raise ValueError(f"{self.name}: weight must be > 0")


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        base = os.path.dirname(os.path.abspath(path))
        entries = []
        for e in raw["entries"]:
            p = e["path"] if os.path.isabs(e["path"]) else os.path.join(base, e["path"])
            entries.append(ManifestEntry(e["name"], p, int(e.get("expected_count", 0)), float(e.get("weight", 0.0))))
        return cls(tuple(entries))


class DatasetCountError(ValueError):
    pass


# --- prompt -------------------------------------------------------------------


def render_system_prompt(assignment: IdAssignment, n: Optional[int] = None, width: int = 3) -> str:
    n = assignment.n if n is None else n
    if n < 1 or n != assignment.n:
        raise ValueError(f"object count {n} does not match assignment of {assignment.n}")
    pairs = " ".join(f"{make_id_token(p, width)} {OBJECT_PLACEHOLDER}" for p in range(1, n + 1))
    return SYSTEM_PREAMBLE + SCENE_OPEN + pairs + SCENE_CLOSE


def object_binding(assignment: IdAssignment, width: int = 3) -> list:
    """``(token, proposal index)`` in sequence order: which features fill each ``<object>``."""
    return [(make_id_token(p + 1, width), idx) for p, idx in enumerate(assignment.permutation)]


def join_ids(tokens) -> str:
    """``A``; ``A and B``; ``A, B, and C``."""
    tokens = list(tokens)
    if not tokens:
        raise ValueError("nothing to join")
    if len(tokens) == 1:
        return tokens[0]
    if len(tokens) == 2:
        return f"{tokens[0]} and {tokens[1]}"
    return ", ".join(tokens[:-1]) + ", and " + tokens[-1]


# --- records ------------------------------------------------------------------


def _token_for(assignment, proposal, width):
    return make_id_token(assignment.position_of(proposal), width)


def make_task_record(
    task_kind: str,
    scene,
    assignment: IdAssignment,
    fields: dict,
    record_id: Optional[str] = None,
    templates: Optional[dict] = None,
    width: int = 3,
) -> TaskRecord:
    """Instantiate one single-turn record.

    Object references in ``fields`` (``target``, ``targets``) are proposal
    indices; the record stores their 1-based positions under ``assignment``.
    """
    if task_kind not in TASK_KINDS:
        raise ValueError(f"unknown task kind {task_kind!r}")
    if assignment.n != scene.n_objects:
        raise ValueError(f"assignment covers {assignment.n} objects, scene has {scene.n_objects}")
    if task_kind in ("cot_qa", "cot_grounding"):
        from sceneseq import gcot

        return gcot.record_from_fields(task_kind, scene, assignment, fields, record_id=record_id, width=width)

    for key in _REQUIRED[task_kind]:
        if key not in fields or fields[key] in (None, ""):
            raise MissingFieldError(f"{task_kind} requires field {key!r}")
    templates = templates or load_templates()
    tmpl = templates[task_kind]
    slots = {k: v for k, v in fields.items() if isinstance(v, str)}
    targets = []

    if "target" in _REQUIRED[task_kind]:
        targets = [int(fields["target"])]
        slots["target"] = _token_for(assignment, targets[0], width)
    if task_kind == "grounding_multi":
        targets = [int(t) for t in fields["targets"]]
    if task_kind in ("qa", "situated_qa"):
        answers = list(fields["answers"])
        if not answers:
            raise MissingFieldError(f"{task_kind} requires at least one answer")
        slots["answer"] = answers[0]

    positions = [assignment.position_of(t) for t in targets]
    slots["ids"] = ", ".join(make_id_token(p, width) for p in positions)
    user = tmpl["user"].format(**slots)
    if task_kind == "grounding_multi" and not positions:
        assistant = tmpl["assistant_empty"]
    else:
        assistant = tmpl["assistant"].format(**slots)

    meta = dict(fields.get("meta", {}))
    meta["id_order"] = list(assignment.permutation)
    if task_kind in ("qa", "situated_qa"):
        meta["answers"] = list(fields["answers"])
    rid = record_id if record_id is not None else f"{scene.scene_id}/{task_kind}"
    return TaskRecord(
        record_id=rid,
        scene_id=scene.scene_id,
        task_kind=task_kind,
        system_prompt=render_system_prompt(assignment, width=width),
        user_text=user,
        assistant_text=assistant,
        target_ids=positions,
        meta=meta,
    )


def validate_record(rec: TaskRecord, n_objects: int, width: int = 3) -> list:
    problems = []
    if rec.task_kind not in TASK_KINDS:
        problems.append(f"{rec.record_id}: unknown task kind {rec.task_kind!r}")
    for name in ("user_text", "assistant_text"):
        diags = []
        for pos, _ in parse_id_tokens(getattr(rec, name), width, diags):
            if pos > n_objects:
                problems.append(f"{rec.record_id}: {name} references position {pos} > {n_objects}")
        problems.extend(f"{rec.record_id}: {name}: {d}" for d in diags)
    for pos in rec.target_ids:
        if not 1 <= pos <= n_objects:
            problems.append(f"{rec.record_id}: target position {pos} out of range")
    return problems


def validate_corpus(records, object_counts: dict, width: int = 3) -> list:
    """``object_counts`` maps scene_id to its proposal count."""
    problems = []
    for rec in records:
        if rec.scene_id not in object_counts:
            problems.append(f"{rec.record_id}: unknown scene {rec.scene_id!r}")
            continue
        problems.extend(validate_record(rec, object_counts[rec.scene_id], width))
    return problems


def write_jsonl(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write((rec.to_json() if isinstance(rec, TaskRecord) else json.dumps(rec, ensure_ascii=False)) + "\n")


def read_jsonl(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# --- packing ------------------------------------------------------------------


def pack_sequence(prefix_tokens, response_tokens) -> PackedSequence:
    """Concatenate prefix and response; the loss mask is True only on the response."""
    prefix = tuple(int(t) for t in prefix_tokens)
    response = tuple(int(t) for t in response_tokens)
    if not response:
        raise ValueError("response must be non-empty")
    mask = (False,) * len(prefix) + (True,) * len(response)
    return PackedSequence(prefix, response, mask)


# --- mixing -------------------------------------------------------------------


def weighted_interleave(sizes, weights, rng: random.Random) -> list:
    """Source choice per draw, proportional to weight among sources with records left."""
    remaining = list(sizes)
    order = []
    while any(remaining):
        active = [i for i, r in enumerate(remaining) if r > 0]
        total = sum(weights[i] for i in active)
        x = rng.random() * total
        acc = 0.0
        pick = active[-1]
        for i in active:
            acc += weights[i]
            if x < acc:
                pick = i
                break
        order.append(pick)
        remaining[pick] -= 1
    return order


def assemble_dataset(manifest: DatasetManifest, seed: int, tolerance: float = 0.0, strict: bool = False):
    """Shuffle each source with its own seeded stream, then interleave by weight.

    Returns ``(records, stats)``; ``stats["sources"]`` carries per-source counts
    and a ``mismatch`` flag when the actual count differs from the expected one
    by more than ``tolerance`` (relative).
    """
    pools = []
    for e in manifest.entries:
        if not os.path.isfile(e.path):
            raise FileNotFoundError(f"{e.name}: cannot read {e.path}")
        recs = read_jsonl(e.path)
        random.Random(f"{seed}:{e.name}").shuffle(recs)
        pools.append(recs)

    sources = []
    for e, recs in zip(manifest.entries, pools):
        actual = len(recs)
        allowed = tolerance * e.expected_count
        mismatch = abs(actual - e.expected_count) > allowed
        sources.append({"name": e.name, "expected": e.expected_count, "actual": actual,
                        "weight": e.weight, "mismatch": mismatch})
    bad = [s["name"] for s in sources if s["mismatch"]]
    if strict and bad:
        raise DatasetCountError(f"count mismatch beyond tolerance: {', '.join(bad)}")

    order = weighted_interleave([len(p) for p in pools], [e.weight for e in manifest.entries], random.Random(seed))
    cursors = [0] * len(pools)
    stream = []
    for i in order:
        rec = dict(pools[i][cursors[i]])
        cursors[i] += 1
        rec.setdefault("meta", {})
        rec["meta"] = dict(rec["meta"], source=manifest.entries[i].name)
        stream.append(rec)
    stats = {
        "seed": seed,
        "total": len(stream),
        "expected_total": sum(e.expected_count for e in manifest.entries),
        "sources": sources,
        "mismatches": bad,
    }
    return stream, stats
