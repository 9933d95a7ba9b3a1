import json
import random
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pytest

from conftest import make_scene
from sceneseq.gcot import (
    COT_SUFFIX,
    CotAnnotation,
    generate,
    gen_category_cot,
    gen_qa_cot,
    gen_space_cot,
    is_complete,
    nearest_objects,
    parse_cot_response,
)
from sceneseq.identifiers import assign_ids
from sceneseq.scene import object_centroid

GOLDENS = json.loads((Path(__file__).parent / "goldens" / "gcot.json").read_text())


def _line_scene(xs, scene_id="s0"):
    pts = np.zeros((len(xs), 3))
    pts[:, 0] = xs
    return make_scene(pts, [[i] for i in range(len(xs))], scene_id=scene_id)


SCENE50 = _line_scene(np.arange(50.0))
FIXED50 = assign_ids(50)


def test_golden_qa():
    rec = generate(CotAnnotation("qa", "What color is the chair?", related=(8, 1, 6), answer="brown"), SCENE50, FIXED50)
    assert asdict(rec) == GOLDENS["qa"]


def test_golden_category():
    a = CotAnnotation("category", "the chair near the window", category="chair", category_members=(12, 44), target=44)
    assert asdict(generate(a, SCENE50, FIXED50)) == GOLDENS["category"]


def test_golden_space():
    assert asdict(generate(CotAnnotation("space", "the lamp beside the bed", target=20), SCENE50, FIXED50)) \
        == GOLDENS["space"]


def test_qa_singular():
    rec = gen_qa_cot(CotAnnotation("qa", "Q?", related=(4,), answer="yes"), SCENE50, FIXED50)
    assert rec.assistant_text.startswith("[Step 1] The objects related to the question is <OBJ005>.")
    with pytest.raises(ValueError):
        gen_qa_cot(CotAnnotation("qa", "Q?", related=(), answer="yes"), SCENE50, FIXED50)
    with pytest.raises(ValueError):
        gen_qa_cot(CotAnnotation("qa", "Q?", related=(1,), answer=" "), SCENE50, FIXED50)


def test_suffix_bytes():
    rec = gen_qa_cot(CotAnnotation("qa", "Q?", related=(4,), answer="yes"), SCENE50, FIXED50)
    assert rec.user_text.endswith(" Please think through the answer step by step.")
    assert COT_SUFFIX.encode() == b"Please think through the answer step by step."


def test_category_single_member():
    rec = gen_category_cot(CotAnnotation("category", "d", category="sofa", category_members=(3,), target=3),
                           SCENE50, FIXED50)
    steps = parse_cot_response(rec.assistant_text).steps
    assert steps[1].positions == [4] and steps[2].positions == [4]
    with pytest.raises(ValueError):
        gen_category_cot(CotAnnotation("category", "d", category="sofa", category_members=(3,), target=5),
                         SCENE50, FIXED50)


def test_space_fewer_than_k():
    scene = _line_scene([0.0, 1.0, 2.0, 3.0])
    rec = gen_space_cot(CotAnnotation("space", "d", target=0), scene, assign_ids(4), k=5)
    assert parse_cot_response(rec.assistant_text).steps[0].positions == [2, 3, 4]
    with pytest.raises(ValueError):
        gen_space_cot(CotAnnotation("space", "d", target=0), _line_scene([0.0]), assign_ids(1))


def test_space_collinear():
    scene = _line_scene([0.0, 6.0, 1.0, 5.0, 2.0, 4.0, 3.0])
    assert nearest_objects(scene, 0, 5) == [2, 4, 6, 5, 3]


def test_space_ties_lower_index():
    scene = _line_scene([0.0, 2.0, -1.0, 1.0])
    assert nearest_objects(scene, 0, 2) == [2, 3]


def _brute_knn(scene, target, k):
    c = object_centroid(scene, target)
    best = []
    for i in range(scene.n_objects):
        if i == target:
            continue
        d = float(np.sqrt(np.sum((object_centroid(scene, i) - c) ** 2)))
        best.append((d, i))
    best.sort()
    return [i for _, i in best[:k]]


def test_space_matches_brute_force_on_synth(synth_scene):
    scene, _ = synth_scene
    for t in range(scene.n_objects):
        assert nearest_objects(scene, t, 5) == _brute_knn(scene, t, 5)


def _random_annotation(rnd, n):
    kind = rnd.choice(["qa", "category", "space"])
    if kind == "qa":
        rel = rnd.sample(range(n), rnd.randint(1, min(6, n)))
        return CotAnnotation("qa", "Q?", related=rel, answer=rnd.choice(["brown", "two chairs", "on the left"]))
    members = rnd.sample(range(n), rnd.randint(1, min(6, n)))
    return CotAnnotation(kind, "desc", category="chair", category_members=members, target=rnd.choice(members))


def test_generate_parse_roundtrip_fuzz():
    rnd = random.Random(0)
    for _ in range(300):
        n = rnd.randint(2, 60)
        scene = _line_scene(np.array([rnd.random() for _ in range(n)]))
        a_ids = assign_ids(n, "random", rnd.randrange(10**6))
        ann = _random_annotation(rnd, n)
        rec = generate(ann, scene, a_ids)
        parsed = parse_cot_response(rec.assistant_text)
        assert parsed.diagnostics == []
        assert [s.number for s in parsed.steps] == list(range(1, len(parsed.steps) + 1))
        if ann.kind == "qa":
            assert parsed.steps[0].positions == sorted(a_ids.position_of(p) for p in ann.related)
            assert parsed.final_answer == ann.answer
        else:
            assert parsed.final_answer == [a_ids.position_of(ann.target)] == rec.target_ids
        if ann.kind == "category":
            m = int(parsed.steps[1].text.split()[2])
            assert m == len(parsed.steps[1].positions) == len(set(ann.category_members))


def test_parse_fallbacks():
    p = parse_cot_response("  a brown chair \n")
    assert p.steps == [] and p.final_answer == "a brown chair"
    p = parse_cot_response("[Step 2] The target object is <OBJ004>. [Step 1] see <OBJ001>")
    assert [s.number for s in p.steps] == [2, 1]
    assert p.diagnostics
    assert p.final_answer == [1]
    p = parse_cot_response("preamble [Step 1] The answer is: red")
    assert p.final_answer == "red" and p.diagnostics


def test_is_complete():
    assert is_complete(CotAnnotation("qa", "Q?", related=(1,), answer="a"), 5)
    assert not is_complete(CotAnnotation("qa", "Q?", related=(9,), answer="a"), 5)
    assert not is_complete(CotAnnotation("qa", "", related=(1,), answer="a"), 5)
    assert not is_complete(CotAnnotation("qa", "Q?", related=(1,), answer="[Step 1] x"), 5)
    assert is_complete(CotAnnotation("category", "d", category="c", category_members=(1, 2), target=2), 5)
    assert not is_complete(CotAnnotation("category", "d", category="c", category_members=(1,), target=2), 5)
    assert not is_complete(CotAnnotation("space", "d", target=0), 1)
