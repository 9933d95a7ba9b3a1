"""Grounded chain-of-thought records: template generation and response parsing."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from sceneseq.identifiers import IdAssignment, make_id_token, parse_id_tokens
from sceneseq.scene import object_centroid
from sceneseq.tasking import TaskRecord, join_ids, render_system_prompt

COT_SUFFIX = "Please think through the answer step by step."
STEP_SEP = "\n"
ANSWER_LEAD = "The answer is:"

_STEP_RE = re.compile(r"\[Step (\d+)\]")


@dataclass(frozen=True)
class CotAnnotation:
    """Slots for one template. Object references are proposal indices."""

    kind: str
    text: str
    related: tuple = ()
    answer: str = ""
    category: str = ""
    category_members: tuple = ()
    target: Optional[int] = None
    record_id: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("qa", "category", "space"):
            raise ValueError(f"unknown CoT kind {self.kind!r}")
        object.__setattr__(self, "related", tuple(int(i) for i in self.related))
        object.__setattr__(self, "category_members", tuple(int(i) for i in self.category_members))

    @classmethod
    def from_dict(cls, kind: str, d: dict) -> "CotAnnotation":
        if kind == "qa":
            answers = d.get("answers") or [d.get("answer", "")]
            return cls("qa", d.get("question", ""), related=d.get("related", ()), answer=answers[0] or "",
                       record_id=d.get("record_id"))
        return cls(kind, d.get("description", ""), category=d.get("category", ""),
                   category_members=d.get("category_members", ()), target=d.get("target"),
                   record_id=d.get("record_id"))


@dataclass
class CotStep:
    number: int
    text: str
    positions: list


@dataclass
class CotParse:
    steps: list = field(default_factory=list)
    final_answer: Union[str, list] = ""
    diagnostics: list = field(default_factory=list)


def _tokens(assignment, proposals, width):
    return [make_id_token(assignment.position_of(p), width) for p in proposals]


def _check_answer(answer):
    if not answer.strip():
        raise ValueError("answer must be non-empty")
    if _STEP_RE.search(answer):
        raise ValueError("answer may not contain a step marker")


def _record(a: CotAnnotation, scene, assignment, kind, user, steps, targets, meta, record_id, width):
    meta = dict(meta, id_order=list(assignment.permutation))
    rid = record_id or a.record_id or f"{scene.scene_id}/{kind}"
    return TaskRecord(
        record_id=rid,
        scene_id=scene.scene_id,
        task_kind=kind,
        system_prompt=render_system_prompt(assignment, width=width),
        user_text=user,
        assistant_text=STEP_SEP.join(f"[Step {i}] {s}" for i, s in enumerate(steps, 1)),
        target_ids=targets,
        meta=meta,
    )


def _grounding_user(description):
    return (
        f'What\'s the ID of the object that corresponds to the description "{description}"? '
        f"{COT_SUFFIX}"
    )


def gen_qa_cot(a: CotAnnotation, scene, assignment: IdAssignment, record_id=None, width=3) -> TaskRecord:
    """Two steps: related objects, then the answer."""
    if not a.related:
        raise ValueError("QA chain-of-thought needs at least one related object")
    answer = a.answer.strip()
    _check_answer(answer)
    positions = sorted(assignment.position_of(p) for p in a.related)
    ids = [make_id_token(p, width) for p in positions]
    verb = "is" if len(ids) == 1 else "are"
    steps = [
        f"The objects related to the question {verb} {join_ids(ids)}.",
        f"{ANSWER_LEAD} {answer}.",
    ]
    user = f"{a.text.strip()} {COT_SUFFIX}"
    meta = {"cot_level": "qa", "related_ids": positions, "answers": [answer]}
    return _record(a, scene, assignment, "cot_qa", user, steps, [], meta, record_id, width)


def gen_category_cot(a: CotAnnotation, scene, assignment: IdAssignment, record_id=None, width=3) -> TaskRecord:
    """Three steps: category name, all members of the category, then the target."""
    if a.target is None or a.target not in a.category_members:
        raise ValueError("target must be one of the category members")
    if not a.category.strip():
        raise ValueError("category name must be non-empty")
    positions = sorted(assignment.position_of(p) for p in set(a.category_members))
    target = assignment.position_of(a.target)
    steps = [
        f'The category name of the target object is "{a.category.strip()}".',
        f"There are {len(positions)} objects in this category: {join_ids(make_id_token(p, width) for p in positions)}.",
        f"The target object is {make_id_token(target, width)}.",
    ]
    meta = {"cot_level": "category", "category": a.category.strip(), "related_ids": positions}
    return _record(a, scene, assignment, "cot_grounding", _grounding_user(a.text.strip()), steps,
                   [target], meta, record_id, width)


def nearest_objects(scene, target: int, k: int = 5) -> list:
    """Proposal indices of the ``k`` closest non-target objects by centroid distance.

    Ties go to the smaller proposal index.
    """
    others = [i for i in range(scene.n_objects) if i != target]
    if not others:
        raise ValueError("scene has no object besides the target")
    c = object_centroid(scene, target)
    dist = {i: float(np.linalg.norm(object_centroid(scene, i) - c)) for i in others}
    return sorted(others, key=lambda i: (dist[i], i))[:k]


def gen_space_cot(a: CotAnnotation, scene, assignment: IdAssignment, k: int = 5, record_id=None, width=3) -> TaskRecord:
    """Two steps: the nearest objects around the target, then the target."""
    if a.target is None:
        raise ValueError("space-level chain-of-thought needs a target")
    related = nearest_objects(scene, a.target, k)
    target = assignment.position_of(a.target)
    positions = [assignment.position_of(p) for p in related]
    steps = [
        f"The spatially related objects could include: {join_ids(make_id_token(p, width) for p in positions)}.",
        f"The target object is {make_id_token(target, width)}.",
    ]
    meta = {"cot_level": "space", "related_ids": positions, "k": k}
    return _record(a, scene, assignment, "cot_grounding", _grounding_user(a.text.strip()), steps,
                   [target], meta, record_id, width)


def generate(a: CotAnnotation, scene, assignment, k=5, record_id=None, width=3) -> TaskRecord:
    if a.kind == "qa":
        return gen_qa_cot(a, scene, assignment, record_id, width)
    if a.kind == "category":
        return gen_category_cot(a, scene, assignment, record_id, width)
    return gen_space_cot(a, scene, assignment, k, record_id, width)


def is_complete(a: CotAnnotation, n_objects: int) -> bool:
    """Whether every slot the template needs is present and in range."""
    in_range = lambda i: 0 <= i < n_objects  # noqa: E731
    if not a.text.strip():
        return False
    if a.kind == "qa":
        return bool(a.related) and all(map(in_range, a.related)) and bool(a.answer.strip()) \
            and not _STEP_RE.search(a.answer)
    if a.target is None or not in_range(a.target):
        return False
    if a.kind == "category":
        return bool(a.category.strip()) and a.target in a.category_members \
            and all(map(in_range, a.category_members))
    return n_objects >= 2


def record_from_fields(task_kind, scene, assignment, fields, record_id=None, width=3) -> TaskRecord:
    if task_kind == "cot_qa":
        a = CotAnnotation.from_dict("qa", fields)
    else:
        a = CotAnnotation.from_dict(fields.get("level", "category"), fields)
    return generate(a, scene, assignment, k=int(fields.get("k", 5)), record_id=record_id, width=width)


def parse_cot_response(text: str, width: int = 3) -> CotParse:
    """Split a response on ``[Step N]`` markers and pull out ID tokens and the answer.

    Without markers the whole (stripped) text is the final answer.
    """
    out = CotParse()
    marks = list(_STEP_RE.finditer(text))
    if not marks:
        out.final_answer = text.strip()
        return out
    if text[: marks[0].start()].strip():
        out.diagnostics.append("text before the first step marker ignored")
    for i, m in enumerate(marks):
        end = marks[i + 1].start() if i + 1 < len(marks) else len(text)
        body = text[m.end():end].strip()
        out.steps.append(CotStep(int(m.group(1)), body, [p for p, _ in parse_id_tokens(body, width, out.diagnostics)]))
    numbers = [s.number for s in out.steps]
    if numbers != list(range(1, len(numbers) + 1)):
        out.diagnostics.append(f"step numbers out of order: {numbers}")

    last = out.steps[-1].text
    at = last.find(ANSWER_LEAD)
    if at >= 0:
        ans = last[at + len(ANSWER_LEAD):].strip()
        out.final_answer = ans[:-1] if ans.endswith(".") else ans
    else:
        out.final_answer = list(out.steps[-1].positions)
    return out
