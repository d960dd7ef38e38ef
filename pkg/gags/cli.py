"""
Command-line pipeline: gen-scene -> render -> prompt -> segment -> distill
-> query -> eval, plus the synthetic experiments.

Every command reads a RunConfig (JSON file, then GAGS_* environment
variables, then flags, each overriding the previous), works inside
run.output_dir and writes manifest_<command>.json listing the SHA-256 of
its inputs and outputs.
"""

import argparse
import json
import logging
import re
import sys
from importlib import metadata
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import experiments
from .config import LEVELS, RunConfig, env_default, env_flag, load_run_config, save_json, to_dict
from .distill import Decoder, ViewTargets, active_terms, decode, train
from .errors import ConfigError, GagsError, MissingGroundTruthError, MissingInputError, ShapeMismatchError
from .field import load_cameras, load_field, save_cameras, save_field
from .oracle import (
    Codebook,
    SceneHierarchy,
    export_features,
    export_masks,
    export_view,
    gen_scene,
    ground_truth,
    ingest,
    ingest_view,
    render_labels,
    save_scene_spec,
    scene_preset,
    synth_embed,
    synth_segment,
    view_stem,
)
from .prompt import PromptPlan, save_prompt_overlay
from .query import (
    QueryResult,
    eval_metrics,
    export_summary,
    query_view,
    save_heatmap,
    save_mask,
    summary_table,
)
from .splat import compute_min_depth, export_render, rasterize
from .tensorio import file_sha256, read_label_image, read_tensor, save_png, write_tensor

logger = logging.getLogger(__name__)

PACKAGES = ("numpy", "scipy", "plyfile", "Pillow", "pandas", "openpyxl", "tqdm")


class RunLayout:
    """Paths of every artifact inside one run directory."""

    def __init__(self, root):
        self.root = Path(root)
        self.scene = self.root / "scene"
        self.renders = self.root / "renders"
        self.prompts = self.root / "prompts"
        self.segment = self.root / "segment"
        self.distill = self.root / "distill"
        self.query = self.root / "query"
        self.eval = self.root / "eval"
        self.gt = self.root / "gt"

    @property
    def scene_field(self) -> Path:
        return self.scene / "field.ply"

    @property
    def cameras(self) -> Path:
        return self.scene / "cameras.json"

    @property
    def gt_labels(self) -> Path:
        return self.scene / "gt_labels.tensor"

    @property
    def hierarchy(self) -> Path:
        return self.scene / "hierarchy.json"

    @property
    def codebook(self) -> Path:
        return self.scene / "codebook.json"

    @property
    def prompted_field(self) -> Path:
        return self.prompts / "field.ply"

    @property
    def trained_field(self) -> Path:
        return self.distill / "field.ply"


def _versions() -> Dict[str, str]:
    versions = {}
    for name in ("gags",) + PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


def write_manifest(layout: RunLayout, command: str, run: RunConfig, inputs: Sequence, outputs: Sequence) -> Path:
    """manifest_<command>.json with input/output hashes, the resolved config and package versions."""

    def hashes(paths):
        out = {}
        for p in paths:
            p = Path(p)
            if p.exists():
                try:
                    key = str(p.relative_to(layout.root))
                except ValueError:
                    key = str(p)
                out[key] = file_sha256(p)
        return out

    path = layout.root / f"manifest_{command.replace('-', '_')}.json"
    save_json({
        "command": command,
        "config": to_dict(run),
        "inputs": hashes(inputs),
        "outputs": hashes(outputs),
        "versions": _versions(),
    }, path)
    return path


def banner(title: str, lines: Sequence[str]) -> None:
    print("\n" + "=" * 70)
    print(title)
    print("=" * 70)
    for line in lines:
        print(line)
    print("=" * 70)


def _slug(label: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", label.lower()).strip("_")


def _load_json(path: Path):
    if not path.exists():
        raise MissingInputError(f"missing input: {path} (run the upstream command first)")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _load_field(run: RunConfig, layout: RunLayout, *candidates: Path):
    if run.field_path:
        return load_field(run.field_path), Path(run.field_path)
    for path in candidates:
        if path.exists():
            return load_field(path), path
    raise MissingInputError(f"no field found (looked for {', '.join(str(c) for c in candidates)})")


def _load_cameras(run: RunConfig, layout: RunLayout):
    path = Path(run.cameras_path) if run.cameras_path else layout.cameras
    if not path.exists():
        raise MissingInputError(f"cameras not found: {path}")
    return load_cameras(path), path


def _views(run: RunConfig, count: int) -> List[int]:
    if run.query.views is None:
        return list(range(count))
    bad = [v for v in run.query.views if not 0 <= v < count]
    if bad:
        raise ConfigError(f"query.views {bad} out of range for {count} cameras")
    return list(run.query.views)


def cmd_gen_scene(run: RunConfig, layout: RunLayout) -> None:
    seed = run.require_seed()
    spec = run.scene or scene_preset(run.scene_preset)
    if run.train.feature_dim is not None:
        spec.feature_dim = run.train.feature_dim
    bundle = gen_scene(spec, seed)
    save_field(bundle.field, layout.scene_field)
    save_cameras(bundle.cameras, layout.cameras)
    write_tensor(layout.gt_labels, bundle.gt_labels)
    save_json(bundle.hierarchy.to_json(), layout.hierarchy)
    save_json(bundle.codebook.to_json(), layout.codebook)
    save_scene_spec(spec, layout.scene / "scene.json")
    outputs = [layout.scene_field, layout.cameras, layout.gt_labels, layout.hierarchy, layout.codebook,
               layout.scene / "scene.json"]
    write_manifest(layout, "gen-scene", run, [], outputs)
    banner("SCENE SUMMARY", [
        f"Objects:    {len(spec.objects)}",
        f"Gaussians:  {len(bundle.field)}",
        f"Cameras:    {len(bundle.cameras)}",
        f"Nodes:      {' / '.join(str(len(bundle.hierarchy.labels[k])) for k in range(3))} (s / p / w)",
        f"Output:     {layout.scene}",
    ])


def cmd_render(run: RunConfig, layout: RunLayout) -> None:
    field_, field_path = _load_field(run, layout, layout.prompted_field, layout.scene_field)
    cameras, cameras_path = _load_cameras(run, layout)
    outputs = []
    covered = 0
    for k, camera in enumerate(cameras):
        out = rasterize(field_, camera, threads=run.threads)
        stem = view_stem(k)
        outputs += export_render(out, camera, layout.renders, stem)
        depth = np.where(out.depth_valid, 1.0 - out.depth_map / max(out.depth_map.max(), 1e-9), 0.0)
        save_png(layout.renders / f"{stem}_depth.png", depth)
        outputs.append(layout.renders / f"{stem}_depth.png")
        if field_.colors is not None:
            save_png(layout.renders / f"{stem}_color.png", out.blend(field_.colors))
            outputs.append(layout.renders / f"{stem}_color.png")
        covered += int(out.covered.sum())
    write_manifest(layout, "render", run, [field_path, cameras_path], outputs)
    total = sum(c.width * c.height for c in cameras)
    banner("RENDER SUMMARY", [
        f"Views:      {len(cameras)}",
        f"Coverage:   {covered}/{total} pixels ({covered / max(total, 1) * 100:.1f}%)",
        f"Output:     {layout.renders}",
    ])


def cmd_prompt(run: RunConfig, layout: RunLayout) -> None:
    seed = run.require_seed()
    prompt = experiments.prompt_config(run)
    field_, field_path = _load_field(run, layout, layout.scene_field)
    cameras, cameras_path = _load_cameras(run, layout)
    renders = [rasterize(field_, cam, threads=run.threads) for cam in cameras]
    fallback = compute_min_depth(field_, cameras, prompt.visibility_threshold, outputs=renders)
    plans = experiments.prompt_views(field_, cameras, renders, prompt, seed, run.train.gas_on)
    outputs = [layout.prompted_field]
    save_field(field_, layout.prompted_field)
    for k, (out, plan) in enumerate(zip(renders, plans)):
        plan_path = layout.prompts / f"{view_stem(k)}_prompts.json"
        overlay = layout.prompts / f"{view_stem(k)}_prompts.png"
        plan.save(plan_path)
        depth = np.where(out.depth_valid, 1.0 - out.depth_map / max(out.depth_map.max(), 1e-9), 0.0)
        save_prompt_overlay(plan, depth, overlay)
        outputs += [plan_path, overlay]
    write_manifest(layout, "prompt", run, [field_path, cameras_path], outputs)
    counts = [p.total_count for p in plans]
    banner("PROMPT SUMMARY", [
        f"Mode:       {'depth-aware' if run.train.gas_on else 'uniform'}",
        f"Views:      {len(plans)}",
        f"Prompts:    {sum(counts)} total, {min(counts)}-{max(counts)} per view",
        f"MD fallback: {fallback} Gaussian(s) not visible in any view",
        f"Output:     {layout.prompts}",
    ])


def _load_oracle(layout: RunLayout):
    for path in (layout.gt_labels, layout.hierarchy, layout.codebook):
        if not path.exists():
            raise MissingInputError(f"synthetic segmentation needs {path}; use the ingest section for real data")
    return (read_tensor(layout.gt_labels), SceneHierarchy.from_json(_load_json(layout.hierarchy)),
            Codebook.from_json(_load_json(layout.codebook)))


def cmd_segment(run: RunConfig, layout: RunLayout) -> None:
    cameras, cameras_path = _load_cameras(run, layout)
    inputs: List[Path] = [cameras_path]
    outputs: List[Path] = []
    regions = np.zeros(3, dtype=np.int64)
    if run.ingest.masks_dir:
        masks_dir = Path(run.ingest.masks_dir)
        features_dir = Path(run.ingest.features_dir or run.ingest.masks_dir)
        for k, camera in enumerate(cameras):
            stem = view_stem(k)
            mask_files = [_existing(masks_dir, f"{stem}_mask_{name}", (".pgm", ".png")) for name in LEVELS]
            feature_files = [features_dir / f"{stem}_feat_{name}.tensor" for name in LEVELS]
            masks, features = ingest(mask_files, feature_files)
            if masks.shape != (camera.height, camera.width):
                raise ShapeMismatchError(f"view {k}: masks are {masks.shape}, camera is {(camera.height, camera.width)}")
            inputs += mask_files + feature_files
            outputs += export_masks(masks, layout.segment, k) + export_features(features, layout.segment, k)
            regions += [masks.region_count(level) for level in range(3)]
        mode = "ingested"
    else:
        seed = run.require_seed()
        field_, field_path = _load_field(run, layout, layout.prompted_field, layout.scene_field)
        gt_labels, hierarchy, codebook = _load_oracle(layout)
        inputs += [field_path, layout.gt_labels, layout.hierarchy, layout.codebook]
        for k, camera in enumerate(cameras):
            plan_path = layout.prompts / f"{view_stem(k)}_prompts.json"
            if not plan_path.exists():
                raise MissingInputError(f"missing prompts for view {k}: {plan_path}")
            plan = PromptPlan.load(plan_path)
            labels = render_labels(rasterize(field_, camera, threads=run.threads), gt_labels)
            masks = synth_segment(labels, plan, run.segment, seed, k, hierarchy)
            features = synth_embed(masks, codebook, run.segment.level_noise, seed, k)
            labels_path = layout.segment / f"{view_stem(k)}_labels.tensor"
            write_tensor(labels_path, labels)
            inputs.append(plan_path)
            outputs += export_view(masks, features, layout.segment, k) + [labels_path]
            regions += [masks.region_count(level) for level in range(3)]
        mode = "synthetic"
    write_manifest(layout, "segment", run, inputs, outputs)
    banner("SEGMENT SUMMARY", [
        f"Source:     {mode}",
        f"Views:      {len(cameras)}",
        f"Regions:    {regions[0]} / {regions[1]} / {regions[2]} (s / p / w)",
        f"Output:     {layout.segment}",
    ])


def _existing(directory: Path, stem: str, suffixes) -> Path:
    for suffix in suffixes:
        path = directory / f"{stem}{suffix}"
        if path.exists():
            return path
    return directory / f"{stem}{suffixes[0]}"


def cmd_distill(run: RunConfig, layout: RunLayout, progress: bool = False) -> None:
    seed = run.require_seed()
    field_, field_path = _load_field(run, layout, layout.prompted_field, layout.scene_field)
    cameras, cameras_path = _load_cameras(run, layout)
    targets = [ViewTargets(*ingest_view(layout.segment, k)) for k in range(len(cameras))]
    config = run.train
    if config.seed is None:
        config.seed = seed
    log_path = layout.distill / "train_log.jsonl"
    layout.distill.mkdir(parents=True, exist_ok=True)
    result = train(field_, cameras, targets, config, run_dir=layout.distill, log_path=log_path,
                   threads=run.threads, progress=progress)
    save_field(result.field, layout.trained_field)
    outputs = [layout.trained_field, log_path] + result.decoder.save(layout.distill)
    inputs = [field_path, cameras_path] + sorted(layout.segment.glob("view_*"))
    write_manifest(layout, "distill", run, inputs, outputs)
    terms = [name for name, on in active_terms(config).items() if on]
    lines = [f"Mode:       {config.distill_mode}", f"Terms:      {', '.join(terms)}",
             f"Iterations: {config.iterations}"]
    if result.log:
        first, last = result.log[0], result.log[-1]
        lines += [
            f"Loss:       {first['total']:.4f} -> {last['total']:.4f}",
            f"Alpha:      s {last['alpha_s']:.3f}  p {last['alpha_p']:.3f}  w {last['alpha_w']:.3f}",
        ]
    lines.append(f"Output:     {layout.distill}")
    banner("DISTILL SUMMARY", lines)


def _text_table(run: RunConfig, layout: RunLayout, queries: Sequence[str]):
    """
    Query and canonical embeddings. An external TensorFile holds one row per
    query followed by the four canonical phrases.
    """
    if run.query.text_embeddings:
        table = read_tensor(run.query.text_embeddings).astype(np.float64)
        if table.ndim != 2 or len(table) != len(queries) + 4:
            raise ConfigError(f"{run.query.text_embeddings}: expected {len(queries) + 4} rows "
                              "(queries then the four canonical phrases)")
        table /= np.linalg.norm(table, axis=1, keepdims=True)
        return {q: table[i] for i, q in enumerate(queries)}, table[len(queries):]
    codebook = Codebook.from_json(_load_json(layout.codebook))
    return {q: codebook.text_embedding(q) for q in queries}, codebook.canonical()


def _queries(run: RunConfig, layout: RunLayout) -> List[str]:
    if run.query.queries:
        return list(run.query.queries)
    if layout.hierarchy.exists():
        return list(SceneHierarchy.from_json(_load_json(layout.hierarchy)).labels[2])
    raise ConfigError("query.queries is empty and there is no scene hierarchy to take labels from")


def cmd_query(run: RunConfig, layout: RunLayout) -> None:
    field_, field_path = _load_field(run, layout, layout.trained_field)
    cameras, cameras_path = _load_cameras(run, layout)
    decoder = Decoder.load(layout.distill)
    queries = _queries(run, layout)
    text, canon = _text_table(run, layout, queries)
    records = []
    outputs = []
    for k in _views(run, len(cameras)):
        out = rasterize(field_, cameras[k], threads=run.threads)
        f_clip, _, covered = decode(decoder, out.feature_map, out.covered)
        for label in queries:
            rmap, result = query_view(label, k, f_clip, covered, text[label], canon, run.query)
            stem = f"{view_stem(k)}_{_slug(label)}"
            save_heatmap(rmap, layout.query / f"{stem}.png")
            save_mask(result.mask, layout.query / f"{stem}_mask.pgm")
            outputs += [layout.query / f"{stem}.png", layout.query / f"{stem}_mask.pgm"]
            entry = result.to_json()
            entry["mask"] = f"{stem}_mask.pgm"
            records.append(entry)
    results_path = layout.query / "results.json"
    save_json(records, results_path)
    write_manifest(layout, "query", run, [field_path, cameras_path, layout.distill / "decoder.json"],
                   [results_path] + outputs)
    banner("QUERY SUMMARY", [
        f"Queries:    {len(queries)}",
        f"Views:      {len(records) // max(len(queries), 1)}",
        f"Output:     {layout.query}",
    ])


def _ground_truth(layout: RunLayout, queries: Sequence[str], views: Sequence[int]):
    """
    GT boxes and masks per (query, view): from gt/gt.json when present,
    otherwise derived from the label renders and written there.
    """
    gt_json = layout.gt / "gt.json"
    gt = {}
    if gt_json.exists():
        for entry in _load_json(gt_json):
            mask = read_label_image(layout.gt / entry["mask"]) > 0
            gt[(entry["query"], entry["view"])] = {"box": entry["box"], "mask": mask}
        return gt, [gt_json]
    if not layout.hierarchy.exists():
        raise MissingGroundTruthError(f"no ground truth: provide {gt_json} or run the synthetic pipeline")
    hierarchy = SceneHierarchy.from_json(_load_json(layout.hierarchy))
    entries = []
    inputs = [layout.hierarchy]
    for k in views:
        labels_path = layout.segment / f"{view_stem(k)}_labels.tensor"
        if not labels_path.exists():
            raise MissingGroundTruthError(f"no label render for view {k}: {labels_path}")
        inputs.append(labels_path)
        truth = ground_truth(read_tensor(labels_path), hierarchy, queries)
        for label in queries:
            box = truth[label]["box"]
            if box is None:
                continue
            name = f"{view_stem(k)}_{_slug(label)}_gt.pgm"
            save_mask(truth[label]["mask"], layout.gt / name)
            gt[(label, k)] = {"box": box, "mask": truth[label]["mask"]}
            entries.append({"query": label, "view": k, "box": list(box), "mask": name})
    save_json(entries, gt_json)
    return gt, inputs


def cmd_eval(run: RunConfig, layout: RunLayout) -> Dict:
    results_path = layout.query / "results.json"
    records = _load_json(results_path)
    queries = sorted({r["label"] for r in records})
    views = sorted({r["view"] for r in records})
    gt, gt_inputs = _ground_truth(layout, queries, views)
    results = []
    skipped = 0
    for r in records:
        if (r["label"], r["view"]) not in gt:
            skipped += 1
            continue
        mask = read_label_image(layout.query / r["mask"]) > 0
        results.append(QueryResult(r["label"], r["view"], tuple(r["localization"]), mask, r["peak"]))
    if skipped:
        logger.info("%d query/view pairs have no visible ground truth and are not scored", skipped)
    record = eval_metrics(results, gt)
    metrics_path = layout.eval / "metrics.json"
    save_json(record.to_json(), metrics_path)
    table = summary_table(record)
    csv_path = layout.eval / "summary.csv"
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(csv_path, index=False)
    xlsx_path = export_summary(table, layout.eval / "summary.xlsx")
    write_manifest(layout, "eval", run, [results_path] + gt_inputs, [metrics_path, csv_path, xlsx_path])
    hits = sum(e["hit"] for e in record.entries)
    banner("EVALUATION SUMMARY", [
        f"Pairs:      {len(record.entries)}",
        f"mAcc:       {hits}/{len(record.entries)} ({record.mAcc * 100:.1f}%)",
        f"mIoU:       {record.mIoU * 100:.1f}%",
        f"Output:     {layout.eval}",
    ])
    return record.to_json()


def cmd_pipeline(run: RunConfig, layout: RunLayout, progress: bool = False) -> None:
    cmd_gen_scene(run, layout)
    cmd_prompt(run, layout)
    cmd_segment(run, layout)
    cmd_distill(run, layout, progress)
    cmd_query(run, layout)
    cmd_eval(run, layout)


EXPERIMENTS: Dict[str, Callable] = {
    "granularity": lambda run, progress: experiments.granularity_selection(run, progress),
    "gad-vs-average": lambda run, progress: experiments.gad_vs_average(run, progress=progress),
    "gas-consistency": lambda run, progress: experiments.gas_consistency(run),
    "query-accuracy": lambda run, progress: experiments.query_accuracy(run, progress),
}


def cmd_experiment(run: RunConfig, layout: RunLayout, name: str, progress: bool = False) -> Dict:
    result = EXPERIMENTS[name](run, progress)
    path = layout.root / f"experiment_{name.replace('-', '_')}.json"
    save_json(result, path)
    write_manifest(layout, f"experiment-{name}", run, [], [path])
    lines = [f"{key}: {value}" for key, value in sorted(result.items()) if not isinstance(value, (list, dict))]
    banner(f"EXPERIMENT {name.upper()}", lines + [f"Output:     {path}"])
    return result


def _parse_env(name: str, cast):
    value = env_default(name)
    if value is None:
        return None
    try:
        return cast(value)
    except ValueError as e:
        raise ConfigError(f"{name} environment variable: {e}") from e


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """JSON config, then GAGS_* environment, then explicit flags."""
    run = load_run_config(args.config or env_default("CONFIG"))
    env = {
        "output_dir": env_default("OUTPUT_DIR"),
        "seed": _parse_env("SEED", int),
        "threads": _parse_env("THREADS", int),
        "iterations": _parse_env("ITERATIONS", int),
        "distill_mode": env_default("DISTILL_MODE"),
        "gas_on": env_flag("GAS_ON"),
        "feature_dim": _parse_env("FEATURE_DIM", int),
        "lambda_entropy": _parse_env("LAMBDA_ENTROPY", float),
        "lambda_cons": _parse_env("LAMBDA_CONS", float),
    }
    for source in (env, vars(args)):
        for key in ("output_dir", "seed", "threads"):
            if source.get(key) is not None:
                setattr(run, key, source[key])
        for key in ("iterations", "distill_mode", "gas_on", "feature_dim", "lambda_entropy", "lambda_cons"):
            if source.get(key) is not None:
                setattr(run.train, key, source[key])
    if run.threads < 1:
        raise ConfigError("threads must be >= 1")
    run.train.validate()
    return run


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="RunConfig JSON (env GAGS_CONFIG)")
    common.add_argument("--output-dir", "-o", dest="output_dir", help="Run directory (env GAGS_OUTPUT_DIR)")
    common.add_argument("--seed", type=int, help="Run seed (env GAGS_SEED)")
    common.add_argument("--threads", type=int, help="Render threads (env GAGS_THREADS)")
    common.add_argument("--iterations", type=int, help="Training iterations (env GAGS_ITERATIONS)")
    common.add_argument("--distill-mode", dest="distill_mode",
                        choices=["gad", "single_s", "single_p", "single_w", "average"],
                        help="Distillation mode (env GAGS_DISTILL_MODE)")
    common.add_argument("--gas-on", dest="gas_on", action=argparse.BooleanOptionalAction, default=None,
                        help="Depth-aware prompting (env GAGS_GAS_ON)")
    common.add_argument("--feature-dim", dest="feature_dim", type=int, help="Gaussian feature width (env GAGS_FEATURE_DIM)")
    common.add_argument("--lambda-entropy", dest="lambda_entropy", type=float, help="Entropy weight (env GAGS_LAMBDA_ENTROPY)")
    common.add_argument("--lambda-cons", dest="lambda_cons", type=float, help="Consistency weight (env GAGS_LAMBDA_CONS)")
    common.add_argument("--verbose", "-v", action="store_true", default=None, help="Debug logging and progress bars (env GAGS_VERBOSE)")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog="gags",
        description="Granularity-aware feature distillation into a Gaussian field",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Synthetic scene A end to end
  python -m gags pipeline --seed 0 --output-dir runs/scene_a

  # Train with feature averaging instead of granularity weights
  GAGS_DISTILL_MODE=average python -m gags distill --seed 0 -o runs/scene_a

  # Granularity-selection experiment on scene B
  python -m gags experiment granularity --seed 0 -o runs/exp
        """,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("gen-scene", "Generate a synthetic scene"),
        ("render", "Render feature/depth maps and previews"),
        ("prompt", "Plan prompt points per view"),
        ("segment", "Synthesize or ingest masks and region features"),
        ("distill", "Train the feature field and decoder"),
        ("query", "Relevancy maps, localization and masks"),
        ("eval", "mAcc / mIoU against ground truth"),
        ("pipeline", "gen-scene -> prompt -> segment -> distill -> query -> eval"),
    ):
        sub.add_parser(name, parents=[common], help=help_text)
    exp = sub.add_parser("experiment", parents=[common], help="Synthetic experiments")
    exp.add_argument("name", choices=sorted(EXPERIMENTS))
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    verbose = bool(args.verbose) or bool(env_flag("VERBOSE"))
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = resolve_config(args)
        layout = RunLayout(run.output_dir)
        layout.root.mkdir(parents=True, exist_ok=True)
        command = args.command
        if command == "gen-scene":
            cmd_gen_scene(run, layout)
        elif command == "render":
            cmd_render(run, layout)
        elif command == "prompt":
            cmd_prompt(run, layout)
        elif command == "segment":
            cmd_segment(run, layout)
        elif command == "distill":
            cmd_distill(run, layout, verbose)
        elif command == "query":
            cmd_query(run, layout)
        elif command == "eval":
            cmd_eval(run, layout)
        elif command == "pipeline":
            cmd_pipeline(run, layout, verbose)
        else:
            cmd_experiment(run, layout, args.name, verbose)
    except GagsError as e:
        print(f"Error: {e}", file=sys.stderr)
        if getattr(e, "dump_path", None):
            print(f"Diagnostic dump: {e.dump_path}", file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
