import numpy as np
import pytest

from sceneseq.scene import CameraView, FeatureTable, ObjectProposal, Scene
from sceneseq.synth import SynthSpec, gen_scene

# criterion number -> (passed, label, detail); filled by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, label, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} [{k:2d}] {label}: {detail}")


def make_view(view_id="v0", width=32, height=32, f=1.0, c=0.0, extrinsics=None, depth=None, features=None):
    ext = np.eye(4) if extrinsics is None else extrinsics
    feats = None if features is None else FeatureTable(features)
    return CameraView(view_id, f, f, c, c, ext, width, height, depth=depth, patch_features=feats)


def make_scene(points, masks, views=(), scene_id="s0"):
    props = [ObjectProposal(i, np.array(m)) for i, m in enumerate(masks)]
    return Scene(scene_id, np.asarray(points, dtype=float), props, list(views))


@pytest.fixture(scope="session")
def synth_scene():
    return gen_scene(SynthSpec(seed=11, occluder_prob=1.0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def build_cli_workspace(root):
    """Synth scenes plus annotation, manifest, and prediction files for every subcommand.

    Returns a dict of paths (strings). Uses the library directly so the CLI
    is exercised only by the tests themselves.
    """
    import json
    import os
    from dataclasses import asdict

    from sceneseq.identifiers import assign_ids
    from sceneseq.metrics import MaskVolume, save_masks
    from sceneseq.scene import save_scene
    from sceneseq.tasking import make_task_record, write_jsonl

    root = str(root)
    scenes_dir = os.path.join(root, "scenes")
    scenes = []
    for seed in (0, 1):
        scene, side = gen_scene(SynthSpec(seed=seed, n_objects=(4, 6)))
        save_scene(scene, os.path.join(scenes_dir, scene.scene_id))
        scenes.append(scene)

    ann = []
    for s in scenes:
        n = s.n_objects
        ann += [
            {"record_id": f"{s.scene_id}/g0", "scene_id": s.scene_id, "task_kind": "grounding_single",
             "fields": {"description": "the box by the wall", "target": 1}},
            {"record_id": f"{s.scene_id}/m0", "scene_id": s.scene_id, "task_kind": "grounding_multi",
             "fields": {"description": "two boxes", "targets": [0, n - 1]}},
            {"record_id": f"{s.scene_id}/q0", "scene_id": s.scene_id, "task_kind": "qa",
             "fields": {"question": "What color is it?", "answers": ["brown", "tan"]}},
            {"record_id": f"{s.scene_id}/c0", "scene_id": s.scene_id, "task_kind": "dense_caption",
             "fields": {"target": 2, "caption": "a small brown box near the wall"}},
        ]
    ann_path = os.path.join(root, "annotations.jsonl")
    write_jsonl(ann, ann_path)

    cot = []
    for s in scenes:
        cot += [
            {"record_id": f"{s.scene_id}/cq", "scene_id": s.scene_id, "question": "What color?",
             "related": [0, 2], "answers": ["red"]},
            {"record_id": f"{s.scene_id}/bad", "scene_id": s.scene_id, "question": "", "related": [], "answers": []},
        ]
    cot_path = os.path.join(root, "cot.jsonl")
    write_jsonl(cot, cot_path)

    src = []
    for name, n in (("alpha", 7), ("beta", 13)):
        p = os.path.join(root, f"{name}.jsonl")
        write_jsonl([{"record_id": f"{name}-{i}", "meta": {}} for i in range(n)], p)
        src.append({"name": name, "path": f"{name}.jsonl", "expected_count": n})
    manifest = os.path.join(root, "manifest.json")
    with open(manifest, "w") as fh:
        json.dump({"entries": src}, fh)

    s = scenes[0]
    gts = []
    for k in range(6):
        a = assign_ids(s.n_objects, "random", k)
        gts.append(asdict(make_task_record("grounding_single", s, a, {"description": "d", "target": k % s.n_objects},
                                           record_id=f"e{k}")))
    gt_path = os.path.join(root, "gt.jsonl")
    write_jsonl(gts, gt_path)
    pred_path = os.path.join(root, "pred.jsonl")
    write_jsonl([{"record_id": g["record_id"], "text": g["assistant_text"]} for g in gts], pred_path)

    vol = np.zeros((2, 4, 4), bool)
    vol[:, 1:3, 1:3] = True
    save_masks(MaskVolume(vol), os.path.join(root, "mask_gt.json"))
    half = vol.copy()
    half[1] = False
    save_masks(MaskVolume(half), os.path.join(root, "mask_pred.json"))
    write_jsonl([{"record_id": "t0", "scene_id": s.scene_id, "masks_path": "mask_gt.json"}],
                os.path.join(root, "st_gt.jsonl"))
    write_jsonl([{"record_id": "t0", "masks_path": "mask_pred.json"}], os.path.join(root, "st_pred.jsonl"))

    return {
        "root": root,
        "scene_dir": scenes_dir,
        "bundle": os.path.join(scenes_dir, scenes[0].scene_id),
        "annotations": ann_path,
        "cot": cot_path,
        "manifest": manifest,
        "gt": gt_path,
        "pred": pred_path,
        "st_gt": os.path.join(root, "st_gt.jsonl"),
        "st_pred": os.path.join(root, "st_pred.jsonl"),
    }


def cli_invocations(ws, out):
    """One argv per subcommand, writing under ``out``; returns ``[(name, argv, outputs)]``."""
    import os

    j = lambda *p: os.path.join(out, *p)  # noqa: E731
    return [
        ("validate", ["validate", ws["bundle"]], []),
        ("build-sequence", ["build-sequence", "--bundle", ws["bundle"], "--out", j("seq.json"),
                            "--order", "random", "--seed", "5"], [j("seq.json")]),
        ("build-tasks", ["build-tasks", "--scene-dir", ws["scene_dir"], "--manifest", ws["annotations"],
                         "--out", j("tasks.jsonl"), "--seed", "3"], [j("tasks.jsonl"), j("tasks.jsonl.config.json")]),
        ("gen-cot", ["gen-cot", "--kind", "qa", "--annotations", ws["cot"], "--scene-dir", ws["scene_dir"],
                     "--out", j("cot.jsonl"), "--order", "random", "--seed", "3"],
         [j("cot.jsonl"), j("cot.jsonl.config.json")]),
        ("assemble", ["assemble", "--manifest", ws["manifest"], "--seed", "9", "--out", j("mix.jsonl")],
         [j("mix.jsonl"), j("mix.jsonl.stats.json")]),
        ("eval", ["eval", "--benchmark", "scanrefer", "--pred", ws["pred"], "--gt", ws["gt"],
                  "--scene-dir", ws["scene_dir"], "--out", j("eval")],
         [j("eval", f) for f in ("report.json", "rows.csv", "aggregates.png", "scores_hist.png")]),
        ("synth", ["synth", "--out", j("synth"), "--seed", "21", "--scenes", "2"],
         [j("synth", "synth00021", f) for f in ("scene.json", "points.bin", "sidecar.json")]
         + [j("synth", "synth.config.json")]),
        ("token-cost", ["token-cost", "--n", "100", "--scheme", "plain_text"], []),
    ]
