"""Command-line entry point: ``sceneseq <subcommand> ...``.

Exit codes: 0 success, 1 invalid input data, 2 usage error, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from sceneseq import __version__
from sceneseq.aggregation import build_object_record, load_projector
from sceneseq.evaluation import BENCHMARKS, SceneCache, evaluate
from sceneseq.gcot import CotAnnotation, generate, is_complete
from sceneseq.identifiers import ID_KINDS, IdScheme, assign_ids, token_cost
from sceneseq.metrics import CIDER_SCALE
from sceneseq.plotting import render_report_figures
from sceneseq.projection import DEFAULT_EPSILON, OcclusionPolicy
from sceneseq.scene import BundleError, load_scene, object_aabb, object_centroid, read_table, save_scene
from sceneseq.synth import SynthSpec, gen_scene
from sceneseq.tasking import (
    DatasetCountError,
    DatasetManifest,
    MissingFieldError,
    assemble_dataset,
    load_templates,
    make_task_record,
    object_binding,
    read_jsonl,
    render_system_prompt,
    validate_corpus,
    write_jsonl,
)

log = logging.getLogger("sceneseq")

EXIT_OK, EXIT_INVALID, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


def record_seed(seed: int, record_id: str) -> int:
    """Per-record seed, stable across processes and platforms."""
    digest = hashlib.blake2b(f"{seed}:{record_id}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _write_json(path, obj):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _config_echo(args) -> dict:
    skip = {"func", "config", "verbose", "jobs"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _floats(a):
    return None if a is None else [float(x) for x in np.asarray(a).ravel()]


def _assignment(n, order, seed):
    return assign_ids(n, order, seed if order == "random" else None)


# --- subcommands --------------------------------------------------------------


def cmd_validate(args):
    bad = 0
    for path in args.bundles:
        try:
            scene = load_scene(path)
        except BundleError as exc:
            print(f"INVALID {path}: {exc}")
            bad += 1
            continue
        print(f"OK {path}: scene {scene.scene_id}, {len(scene.points)} points, "
              f"{scene.n_objects} proposals, {len(scene.views)} views")
    return EXIT_INVALID if bad else EXIT_OK


def cmd_build_sequence(args):
    scene = load_scene(args.bundle)
    if scene.n_objects < 1:
        raise ValueError("scene has no proposals")
    policy = OcclusionPolicy(args.epsilon, args.require_depth)
    feats3 = read_table(args.features_3d, "features_3d") if args.features_3d else None
    if feats3 is not None and feats3.shape[0] != scene.n_objects:
        raise ValueError(f"features_3d has {feats3.shape[0]} rows for {scene.n_objects} proposals")
    projectors = None
    if args.proj_3d or args.proj_2d:
        projectors = (
            load_projector(args.proj_3d, "f_p") if args.proj_3d else None,
            load_projector(args.proj_2d, "f_v") if args.proj_2d else None,
        )

    def one(i):
        return build_object_record(
            scene, i, policy, None if feats3 is None else feats3[i], projectors,
            patch=args.patch, min_hits=args.min_hits, mask_size_mode=args.mask_size,
        )

    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        records = list(pool.map(one, range(scene.n_objects)))

    assignment = _assignment(scene.n_objects, args.order, args.seed)
    objects = []
    for token, idx in object_binding(assignment, args.id_width):
        r = records[idx]
        lo, hi = object_aabb(scene, idx)
        objects.append({
            "token": token,
            "proposal": idx,
            "centroid": _floats(object_centroid(scene, idx)),
            "aabb": [_floats(lo), _floats(hi)],
            "visible_anywhere": r.visible_anywhere,
            "views_used": r.views_used,
            "views_skipped": r.views_skipped,
            "feature_3d": _floats(r.feature_3d),
            "feature_2d": _floats(r.feature_2d),
            "embed_3d": _floats(r.embed_3d),
            "embed_2d": _floats(r.embed_2d),
        })
    _write_json(args.out, {
        "config": _config_echo(args),
        "scene_id": scene.scene_id,
        "system_prompt": render_system_prompt(assignment, width=args.id_width),
        "id_order": list(assignment.permutation),
        "objects": objects,
    })
    log.info("wrote %d objects to %s", len(objects), args.out)
    return EXIT_OK


def _load_annotations(path):
    if not os.path.isfile(path):
        raise FileNotFoundError(f"annotations file not found: {path}")
    return read_jsonl(path)


def cmd_build_tasks(args):
    cache = SceneCache(args.scene_dir)
    templates = load_templates(args.templates)
    records = []
    for ann in _load_annotations(args.manifest):
        rid = ann["record_id"]
        scene = cache[ann["scene_id"]]
        assignment = _assignment(scene.n_objects, args.order, record_seed(args.seed, rid))
        try:
            rec = make_task_record(ann["task_kind"], scene, assignment, ann.get("fields", {}),
                                   record_id=rid, templates=templates, width=args.id_width)
        except (MissingFieldError, IndexError) as exc:
            raise ValueError(f"record {rid}: {exc}") from exc
        records.append(rec)
    counts = {sid: cache[sid].n_objects for sid in {r.scene_id for r in records}}
    problems = validate_corpus(records, counts, args.id_width)
    if problems:
        for p in problems:
            print(p, file=sys.stderr)
        return EXIT_INVALID
    write_jsonl(records, args.out)
    _write_json(args.out + ".config.json", {"config": _config_echo(args), "records": len(records)})
    log.info("wrote %d records to %s", len(records), args.out)
    return EXIT_OK


def cmd_gen_cot(args):
    cache = SceneCache(args.scene_dir)
    records, dropped = [], []
    for d in _load_annotations(args.annotations):
        a = CotAnnotation.from_dict(args.kind, d)
        scene = cache[d["scene_id"]]
        if not is_complete(a, scene.n_objects):
            dropped.append(d.get("record_id"))
            continue
        assignment = _assignment(scene.n_objects, args.order, record_seed(args.seed, a.record_id or ""))
        records.append(generate(a, scene, assignment, k=args.k, width=args.id_width))
    records.sort(key=lambda r: r.record_id)
    write_jsonl(records, args.out)
    _write_json(args.out + ".config.json", {
        "config": _config_echo(args), "records": len(records), "dropped": len(dropped),
        "dropped_ids": dropped,
    })
    log.info("wrote %d records (%d incomplete annotations dropped)", len(records), len(dropped))
    return EXIT_OK


def cmd_assemble(args):
    manifest = DatasetManifest.load(args.manifest)
    stream, stats = assemble_dataset(manifest, args.seed, args.tolerance, args.strict)
    write_jsonl(stream, args.out)
    stats = dict(stats, sources=[dict(s, path=os.path.relpath(e.path, os.path.dirname(os.path.abspath(args.manifest))))
                                 for s, e in zip(stats["sources"], manifest.entries)])
    _write_json(args.out + ".stats.json", {"config": _config_echo(args), "stats": stats})
    for s in stats["sources"]:
        flag = "  MISMATCH" if s["mismatch"] else ""
        print(f"{s['name']}\t{s['actual']}\t(expected {s['expected']}){flag}")
    print(f"total\t{stats['total']}\t(expected {stats['expected_total']})")
    return EXIT_OK


def _index_jsonl(path):
    rows = read_jsonl(path)
    out = {}
    for r in rows:
        if r["record_id"] in out:
            raise ValueError(f"{path}: duplicate record_id {r['record_id']!r}")
        out[r["record_id"]] = r
    return out


def cmd_eval(args):
    for p in (args.pred, args.gt):
        if not os.path.isfile(p):
            raise FileNotFoundError(f"not found: {p}")
    preds = _index_jsonl(args.pred)
    gts = list(_index_jsonl(args.gt).values())
    for g in gts:
        g.setdefault("meta", {})
    report = evaluate(
        args.benchmark, preds, gts, SceneCache(args.scene_dir), thresholds=args.thresholds,
        cider_scale=args.cider_scale, pred_dir=os.path.dirname(os.path.abspath(args.pred)),
        gt_dir=os.path.dirname(os.path.abspath(args.gt)), config=_config_echo(args),
    )
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    with open(os.path.join(args.out, "rows.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write(report.to_csv())
    if not args.no_figures:
        render_report_figures(report, args.out)
    for k, v in report.aggregates.items():
        print(f"{k}\t{v}")
    return EXIT_OK


def cmd_synth(args):
    spec = SynthSpec.from_json(args.spec) if args.spec else SynthSpec()
    if args.seed is not None:
        spec = SynthSpec(**dict(spec.to_dict(), seed=args.seed))
    os.makedirs(args.out, exist_ok=True)
    for k in range(args.scenes):
        s = SynthSpec(**dict(spec.to_dict(), seed=spec.seed + k))
        scene, sidecar = gen_scene(s)
        dest = os.path.join(args.out, scene.scene_id)
        save_scene(scene, dest)
        _write_json(os.path.join(dest, "sidecar.json"), sidecar)
        print(dest)
    _write_json(os.path.join(args.out, "synth.config.json"), {"config": _config_echo(args), "spec": spec.to_dict()})
    return EXIT_OK


def cmd_token_cost(args):
    scheme = IdScheme(args.scheme, args.id_width, args.feature_tokens)
    print(token_cost(args.n, scheme))
    return EXIT_OK


# --- parser -------------------------------------------------------------------


def _nonneg_int(s):
    v = int(s)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _pos_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sceneseq", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--config", help="JSON file of option defaults; command-line flags override it")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", metavar="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(func=func)
        return sp

    def id_width(sp):
        sp.add_argument("--id-width", type=_pos_int, default=3, help="zero-pad width of <OBJ...> tokens (default 3)")

    def order(sp, default):
        sp.add_argument("--order", choices=("fixed", "random"), default=default,
                        help=f"object ID order (default {default})")
        sp.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")

    sp = add("validate", cmd_validate, "check scene bundles; exit 1 when any is invalid")
    sp.add_argument("bundles", nargs="+", help="bundle directories")

    sp = add("build-sequence", cmd_build_sequence, "build the object sequence (features, prompt) for one bundle")
    sp.add_argument("--bundle", required=True, help="scene bundle directory")
    sp.add_argument("--out", required=True, help="output JSON path")
    order(sp, "fixed")
    id_width(sp)
    sp.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON, help="depth tolerance in meters (default 0.05)")
    sp.add_argument("--require-depth", action="store_true", help="fail on views without a depth map")
    sp.add_argument("--mask-size", choices=("patches", "hits"), default="patches",
                    help="view weight: covered patch count or visible point hits (default patches)")
    sp.add_argument("--min-hits", type=_pos_int, default=1, help="hits needed to cover a patch (default 1)")
    sp.add_argument("--patch", type=_pos_int, default=16, help="patch size in pixels (default 16)")
    sp.add_argument("--features-3d", help="table of per-proposal 3D features (rows = proposals)")
    sp.add_argument("--proj-3d", help="projector file for 3D features")
    sp.add_argument("--proj-2d", help="projector file for 2D features")
    sp.add_argument("--jobs", type=_pos_int, default=1, help="worker threads (output is identical for any value)")

    sp = add("build-tasks", cmd_build_tasks, "instantiate task records from annotations")
    sp.add_argument("--scene-dir", required=True, help="directory holding <scene_id>/ bundles")
    sp.add_argument("--manifest", required=True,
                    help="JSONL of {record_id, scene_id, task_kind, fields}")
    sp.add_argument("--out", required=True, help="output JSONL path")
    sp.add_argument("--templates", help="template JSON overriding the shipped defaults")
    order(sp, "random")
    id_width(sp)

    sp = add("gen-cot", cmd_gen_cot, "generate grounded chain-of-thought records")
    sp.add_argument("--kind", required=True, choices=("qa", "category", "space"))
    sp.add_argument("--annotations", required=True, help="annotation JSONL")
    sp.add_argument("--scene-dir", required=True, help="directory holding <scene_id>/ bundles")
    sp.add_argument("--out", required=True, help="output JSONL path")
    sp.add_argument("--k", type=_pos_int, default=5, help="nearest objects listed for space-level (default 5)")
    order(sp, "random")
    id_width(sp)

    sp = add("assemble", cmd_assemble, "interleave record sources into one training stream")
    sp.add_argument("--manifest", required=True, help="JSON {entries: [{name, path, expected_count, weight}]}")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True, help="output JSONL path")
    sp.add_argument("--tolerance", type=float, default=0.0, help="relative count tolerance before flagging")
    sp.add_argument("--strict", action="store_true", help="fail (exit 1) on count mismatches")

    sp = add("eval", cmd_eval, "score predictions against ground truth")
    sp.add_argument("--benchmark", required=True, choices=BENCHMARKS)
    sp.add_argument("--pred", required=True, help="predictions JSONL")
    sp.add_argument("--gt", required=True, help="ground-truth JSONL")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--scene-dir", help="directory holding <scene_id>/ bundles (box benchmarks)")
    sp.add_argument("--thresholds", type=float, nargs="+", default=[0.25, 0.5], help="IoU thresholds")
    sp.add_argument("--cider-scale", type=float, choices=(1.0, 10.0), default=CIDER_SCALE,
                    help="CIDEr multiplier (default 10)")
    sp.add_argument("--no-figures", action="store_true", help="skip PNG figures")

    sp = add("synth", cmd_synth, "write synthetic scene bundles with ground-truth sidecars")
    sp.add_argument("--spec", help="SynthSpec JSON (defaults used when omitted)")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--seed", type=int, help="override the SynthSpec seed")
    sp.add_argument("--scenes", type=_pos_int, default=1, help="number of scenes, seeds seed..seed+N-1")

    sp = add("token-cost", cmd_token_cost, "tokens spent on N objects under an ID scheme")
    sp.add_argument("--n", type=_nonneg_int, required=True, help="object count")
    sp.add_argument("--scheme", choices=ID_KINDS, required=True)
    sp.add_argument("--feature-tokens", type=_pos_int, default=2, help="feature tokens per object (default 2)")
    id_width(sp)
    return p


def _apply_config(parser, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    with open(known.config, encoding="utf-8") as fh:
        cfg = json.load(fh)
    for action in parser._subparsers._group_actions:
        for sp in action.choices.values():
            sp.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
            for a in sp._actions:
                if a.dest in cfg or a.dest.replace("_", "-") in cfg:
                    a.required = False


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except BundleError as exc:
        print(f"invalid bundle: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (DatasetCountError, ValueError, KeyError, IndexError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
