"""Command-line entry point.

Every subcommand prints a JSON manifest on stdout naming the files it
produced; the next subcommand reads that manifest from stdin when its inputs
are not given explicitly, so stages compose with pipes:

    graphground synth --seed 7 | graphground build | graphground ground --mode graph-only | graphground eval
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields, replace
from typing import List, Optional

from . import __version__
from .gate import GateConfig
from .ingest import LoadError, frame_to_dict, load_frame, load_scene_graph, save_scene_graph, write_depth_pgm
from .pipeline import MODES, Grounder, ModeError, ground_all
from .providers import load_providers
from .reconstruct import AssociationConfig, reconstruct
from .relations import GeometryConfig, extract_relations, relate_scene
from .render import save_png, render_candidates
from .scene import MatcherConfig

log = logging.getLogger("graphground")

EXIT_OK, EXIT_QUERY, EXIT_CONFIG = 0, 1, 2


class ConfigError(Exception):
    pass


# --- helpers ---------------------------------------------------------------

def _read_manifest(args) -> dict:
    if getattr(args, "_manifest", None) is not None:
        return args._manifest
    manifest = {}
    if not sys.stdin.isatty():
        text = sys.stdin.read()
        if text.strip():
            try:
                manifest = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"stdin is not a JSON manifest: {exc}") from exc
    args._manifest = manifest
    return manifest


def _need(args, attr: str, key: str, what: str):
    value = getattr(args, attr, None)
    if value is None:
        value = _read_manifest(args).get(key)
    if value is None:
        raise ConfigError(f"no {what} given (pass --{attr.replace('_', '-')} or pipe a manifest)")
    return value


def _emit(manifest: dict) -> None:
    sys.stdout.write(json.dumps(manifest, sort_keys=True) + "\n")


def _sections(path: Optional[str]) -> dict:
    """Config file: either flat association keys or sections association/matcher/gate/geometry."""
    if path is None:
        return {}
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    known = {"association", "matcher", "gate", "geometry"}
    if not any(k in known for k in doc):
        return {"association": doc}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return doc


def _dataclass_from(cls, d: Optional[dict]):
    d = d or {}
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {cls.__name__}: {exc}") from exc


def _config_path(args) -> Optional[str]:
    return args.config if args.config is not None else _read_manifest(args).get("config")


def _providers(args):
    path = args.provider if args.provider is not None else _read_manifest(args).get("provider")
    try:
        return load_providers(path)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"bad provider config {path}: {exc}") from exc


def _read_jsonl(path: str) -> List[dict]:
    try:
        with open(path) as fh:
            return [json.loads(line) for line in fh if line.strip()]
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc


def _write_jsonl(path: str, rows) -> None:
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _workdir(manifest: dict, fallback: str) -> str:
    return manifest.get("workdir") or os.path.dirname(os.path.abspath(fallback))


# --- subcommands -----------------------------------------------------------

def cmd_synth(args) -> int:
    from .evalharness.synthetic import CameraRig, InfeasibleSpec, SynthSpec, gen_synthetic, relation_script, \
        synthesize_frames

    spec = SynthSpec(n_objects=args.n_objects, n_duplicate_groups=args.duplicate_groups,
                     relation_density=args.relation_density)
    try:
        scene = gen_synthetic(args.seed, spec)
    except InfeasibleSpec as exc:
        raise ConfigError(str(exc)) from exc
    out = os.path.abspath(args.out or f"synth-{args.seed}")
    os.makedirs(os.path.join(out, "frames"), exist_ok=True)
    frames, bindings = synthesize_frames(scene.graph, CameraRig())
    frame_paths = []
    for f in frames:
        depth_name = f"depth_{f.frame_id:03d}.pgm"
        write_depth_pgm(os.path.join(out, "frames", depth_name), f.depth)
        path = os.path.join(out, "frames", f"frame_{f.frame_id:03d}.json")
        with open(path, "w") as fh:
            json.dump(frame_to_dict(f, depth_name), fh, sort_keys=True)
        frame_paths.append(path)
    save_scene_graph(scene.graph, os.path.join(out, "gt_scene.json"), include_points=False)
    queries_path = os.path.join(out, "queries.jsonl")
    _write_jsonl(queries_path, [q.record() for q in scene.queries])

    rules = relation_script(frames, scene.graph, bindings)
    query_rules = []
    for q in sorted(scene.queries, key=lambda q: -len(q.text)):
        doc = {"target": {"label": q.graph.target.label, "attributes": list(q.graph.target.attributes)},
               "landmarks": [{"label": n.label, "attributes": list(n.attributes)} for n in q.graph.nodes[1:]],
               "relations": [{"src": e.src, "rel": e.predicate, "dst": e.dst} for e in q.graph.edges]}
        query_rules.append([f"Referring expression: {q.text}", json.dumps(doc, sort_keys=True)])
    with open(os.path.join(out, "mock_vlm.json"), "w") as fh:
        json.dump({"rules": query_rules + [list(r) for r in rules], "default": "NONE"}, fh, indent=1, sort_keys=True)
    with open(os.path.join(out, "providers.json"), "w") as fh:
        json.dump({"embed": "mock", "chat": {"mock": "mock_vlm.json"}}, fh, indent=1, sort_keys=True)
    with open(os.path.join(out, "config.json"), "w") as fh:
        json.dump({"association": {"dbscan_eps": 0.15, "dbscan_min_pts": 8, "min_points": 30, "voxel_size": 0.03}},
                  fh, indent=1, sort_keys=True)
    _emit({"workdir": out, "seed": args.seed, "frames": frame_paths, "queries": queries_path,
           "provider": os.path.join(out, "providers.json"), "config": os.path.join(out, "config.json"),
           "gt_scene": os.path.join(out, "gt_scene.json")})
    return EXIT_OK


def cmd_build(args) -> int:
    manifest = _read_manifest(args)
    frame_paths = args.frames or manifest.get("frames")
    if not frame_paths:
        raise ConfigError("no frames given (pass frame files or pipe a manifest)")
    section = _sections(_config_path(args)).get("association", {})
    cfg = AssociationConfig.from_dict(section) if section else AssociationConfig()
    if args.no_denoise:
        cfg = replace(cfg, denoise=False)
    providers = _providers(args)
    try:
        frames = [load_frame(p) for p in frame_paths]
    except LoadError as exc:
        raise ConfigError(str(exc)) from exc
    rec = reconstruct(frames, providers.embedder, cfg)
    for w in rec.warnings:
        log.warning(w)
    out = args.out or os.path.join(_workdir(manifest, frame_paths[0]), "scene.json")
    save_scene_graph(rec.graph, out, meta={"denoised": cfg.denoise})
    bind_path = os.path.splitext(out)[0] + ".bindings.json"
    with open(bind_path, "w") as fh:
        json.dump({str(k): {str(m): o for m, o in v.items()} for k, v in rec.bindings.items()}, fh, sort_keys=True)
    manifest = dict(manifest, scene=out, bindings=bind_path, frames=list(frame_paths))
    _emit(manifest)
    return EXIT_OK


def cmd_relate(args) -> int:
    manifest = _read_manifest(args)
    scene_path = _need(args, "scene", "scene", "scene graph")
    try:
        g, header = load_scene_graph(scene_path, with_header=True)
    except LoadError as exc:
        raise ConfigError(str(exc)) from exc
    geo_cfg = _dataclass_from(GeometryConfig, _sections(_config_path(args)).get("geometry"))
    vlm_edges = []
    providers = _providers(args)
    frame_paths = manifest.get("frames") or []
    bind_path = args.bindings or manifest.get("bindings")
    if providers.chat is not None and frame_paths and bind_path:
        with open(bind_path) as fh:
            raw = json.load(fh)
        bindings = {int(k): {int(m): int(o) for m, o in v.items()} for k, v in raw.items()}
        frames = [load_frame(p) for p in frame_paths]
        vlm_edges, stats = extract_relations(frames, bindings, providers.chat, args.stride)
        log.info("relations: %s", stats)
    g = relate_scene(g, vlm_edges, geometric=not args.no_geometric, geo_cfg=geo_cfg)
    out = args.out or scene_path
    meta = {k: v for k, v in header.items() if k not in ("version", "embedding_dim")}
    save_scene_graph(g, out, meta=meta)
    _emit(dict(manifest, scene=out))
    return EXIT_OK


def cmd_ground(args) -> int:
    manifest = _read_manifest(args)
    scene_path = _need(args, "scene", "scene", "scene graph")
    queries_path = _need(args, "queries", "queries", "queries file")
    try:
        g, header = load_scene_graph(scene_path, with_header=True)
    except LoadError as exc:
        raise ConfigError(str(exc)) from exc
    mode = MODES[args.mode]
    if mode.needs_raw_scene and header.get("denoised", True):
        raise ConfigError("--mode no-denoise needs a scene built with `build --no-denoise`")
    sections = _sections(_config_path(args))
    matcher_cfg = _dataclass_from(MatcherConfig, sections.get("matcher"))
    gate_cfg = _dataclass_from(GateConfig, sections.get("gate"))
    providers = _providers(args)
    render_dir = args.dump_renders
    hook = None
    if render_dir:
        os.makedirs(render_dir, exist_ok=True)
        hook = lambda qid, img: save_png(img, os.path.join(render_dir, f"{qid}.png"))
    try:
        grounder = Grounder(g, providers.embedder, providers.chat, args.mode, matcher_cfg, gate_cfg,
                            args.parser, hook)
    except ModeError as exc:
        raise ConfigError(str(exc)) from exc
    queries = _read_jsonl(queries_path)
    results = ground_all(grounder, queries, args.jobs)
    out = args.out or os.path.join(_workdir(manifest, scene_path), f"results-{args.mode}.jsonl")
    _write_jsonl(out, results)
    _emit(dict(manifest, results=out, mode=args.mode))
    return EXIT_QUERY if any("error" in r for r in results) else EXIT_OK


def cmd_eval(args) -> int:
    from .evalharness.metrics import dump_metrics, evaluate, metrics_csv, metrics_table

    results = _read_jsonl(_need(args, "results", "results", "results file"))
    gt = _read_jsonl(_need(args, "queries", "queries", "ground-truth queries file"))
    metrics = evaluate(results, gt)
    text = dump_metrics(metrics)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(metrics_csv(metrics))
    if args.table:
        sys.stderr.write(metrics_table(metrics))
    sys.stdout.write(text)
    return EXIT_OK


def cmd_render(args) -> int:
    scene_path = _need(args, "scene", "scene", "scene graph")
    try:
        g = load_scene_graph(scene_path)
    except LoadError as exc:
        raise ConfigError(str(exc)) from exc
    ids = [int(x) for x in args.ids.split(",")] if args.ids else sorted(g.nodes)
    missing = [i for i in ids if i not in g.nodes]
    if missing:
        raise ConfigError(f"unknown object ids {missing}")
    img = render_candidates(g, ids, width=args.width, height=args.height)
    save_png(img, args.out)
    _emit({"render": os.path.abspath(args.out), "ids": ids})
    return EXIT_OK


# --- argument parsing ------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config (association/matcher/gate/geometry sections)")
    common.add_argument("--provider", help="provider config JSON (embed/chat backends)")
    common.add_argument("--seed", type=int, default=0, help="seed for every random choice")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="graphground", description="3D visual grounding by scene-graph matching")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic scene, frames and queries")
    s.add_argument("--out", help="output directory (default ./synth-SEED)")
    s.add_argument("--n-objects", type=int, default=8)
    s.add_argument("--duplicate-groups", type=int, default=1)
    s.add_argument("--relation-density", type=float, default=0.7)
    s.set_defaults(func=cmd_synth)

    b = sub.add_parser("build", parents=[common], help="frames -> scene graph")
    b.add_argument("frames", nargs="*")
    b.add_argument("--out")
    b.add_argument("--no-denoise", action="store_true", help="skip point-cloud denoising")
    b.set_defaults(func=cmd_build)

    r = sub.add_parser("relate", parents=[common], help="add VLM and geometric relation edges")
    r.add_argument("--scene")
    r.add_argument("--bindings")
    r.add_argument("--out")
    r.add_argument("--stride", type=int, default=1, help="prompt every N-th frame")
    r.add_argument("--no-geometric", action="store_true")
    r.set_defaults(func=cmd_relate)

    g = sub.add_parser("ground", parents=[common], help="queries -> results")
    g.add_argument("--scene")
    g.add_argument("--queries")
    g.add_argument("--out")
    g.add_argument("--mode", choices=list(MODES), default="full")
    g.add_argument("--parser", choices=["rules", "llm"], default="rules")
    g.add_argument("--jobs", type=int, default=1)
    g.add_argument("--dump-renders", metavar="DIR")
    g.set_defaults(func=cmd_ground)

    e = sub.add_parser("eval", parents=[common], help="results -> metrics")
    e.add_argument("--results")
    e.add_argument("--queries")
    e.add_argument("--out")
    e.add_argument("--csv")
    e.add_argument("--table", action="store_true", help="print an aligned table on stderr")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("render", parents=[common], help="debug raster of a scene graph")
    d.add_argument("--scene")
    d.add_argument("--ids", help="comma-separated object ids (default all)")
    d.add_argument("--out", required=True)
    d.add_argument("--width", type=int, default=320)
    d.add_argument("--height", type=int, default=240)
    d.set_defaults(func=cmd_render)
    return p


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if getattr(args, "jobs", 1) < 1:
        sys.stderr.write("error: --jobs must be >= 1\n")
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_CONFIG


def main() -> None:
    sys.exit(run())
