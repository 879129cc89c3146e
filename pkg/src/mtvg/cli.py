"""Batch command line: gen-fixtures, pool, train, predict, fuse, eval, report.

Every command reads one JSON config (``--config`` or ``$MTVG_CONFIG``);
flags override config keys, which override defaults. A data directory holds
``features/<video_id>.mgfb``, ``annotations/<video_id>.json`` and an optional
``manifest.json`` listing videos and named splits.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container, ensemble, evaluation, fusion, matching, report
from . import features as ft
from .experiments import maps_to_predictions
from .temporal import ClipGrid, candidate_bounds, dense_candidates, iou_many

log = logging.getLogger("mtvg")

CONFIG_ENV = "MTVG_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EnsembleConfig:
    normalization: str = "minmax"
    top_k: int = 10
    nms_iou: float = 0.5

    def __post_init__(self) -> None:
        ensemble.NormalizationSpec(self.normalization)
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not 0 < self.nms_iou <= 1:
            raise ValueError("nms_iou must be in (0, 1]")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    n_clips: int = 128
    fusion_mode: str = "concat"
    features: tuple[str, ...] | None = None
    train: matching.TrainConfig = field(default_factory=matching.TrainConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    synthetic: ft.SyntheticSpec = field(default_factory=ft.SyntheticSpec)
    holdout_fraction: float = 0.2
    data_dir: str | None = None

    def __post_init__(self) -> None:
        if self.n_clips < 1:
            raise ValueError("n_clips must be >= 1")
        if self.fusion_mode not in ("concat", "weighted"):
            raise ValueError(f"fusion_mode must be 'concat' or 'weighted', got {self.fusion_mode!r}")
        if self.features is not None and len(set(self.features)) != len(self.features):
            raise ValueError(f"duplicate extractor ids in features: {list(self.features)}")
        if not 0 <= self.holdout_fraction < 1:
            raise ValueError("holdout_fraction must be in [0, 1)")


def _section(cls, doc, name):
    if doc is None:
        return cls()
    if not isinstance(doc, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {unknown}")
    doc = {k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()}
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def build_config(doc: dict, args: argparse.Namespace) -> RunConfig:
    doc = dict(doc)
    top = {"seed", "n_clips", "fusion_mode", "features", "train", "ensemble", "synthetic",
           "holdout_fraction", "paths"}
    unknown = sorted(set(doc) - top)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    train_doc = dict(doc.get("train") or {})
    ens_doc = dict(doc.get("ensemble") or {})
    paths = doc.get("paths") or {}
    if set(paths) - {"data_dir"}:
        raise ConfigError(f"unknown keys in 'paths': {sorted(set(paths) - {'data_dir'})}")

    # flags > config > defaults
    seed = args.seed if args.seed is not None else doc.get("seed", 0)
    for flag, section, key in (("normalization", ens_doc, "normalization"),
                               ("nms_iou", ens_doc, "nms_iou"), ("top_k", ens_doc, "top_k")):
        if getattr(args, flag, None) is not None:
            section[key] = getattr(args, flag)
    if "seed" in train_doc:
        raise ConfigError("set the seed at top level, not inside 'train'")
    train_doc["seed"] = seed
    feats = doc.get("features")
    try:
        return RunConfig(
            seed=int(seed),
            n_clips=int(args.n_clips if args.n_clips is not None else doc.get("n_clips", 128)),
            fusion_mode=args.fusion_mode or doc.get("fusion_mode", "concat"),
            features=tuple(feats) if feats is not None else None,
            train=_section(matching.TrainConfig, train_doc, "train"),
            ensemble=_section(EnsembleConfig, ens_doc, "ensemble"),
            synthetic=_section(ft.SyntheticSpec, doc.get("synthetic"), "synthetic"),
            holdout_fraction=float(doc.get("holdout_fraction", 0.2)),
            data_dir=getattr(args, "data", None) or paths.get("data_dir"),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(args: argparse.Namespace) -> RunConfig:
    path = args.config or os.environ.get(CONFIG_ENV)
    doc = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    return build_config(doc, args)


# -- data directory ------------------------------------------------------------

def _data_dir(cfg: RunConfig) -> Path:
    if not cfg.data_dir:
        raise ConfigError("no data directory: pass --data or set paths.data_dir")
    d = Path(cfg.data_dir)
    if not (d / "features").is_dir() or not (d / "annotations").is_dir():
        raise ConfigError(f"{d} lacks features/ and annotations/ subdirectories")
    return d


def video_ids(data: Path, split: str | None) -> list[str]:
    manifest = data / "manifest.json"
    if split is not None:
        if not manifest.exists():
            raise ConfigError(f"--split {split} needs {manifest}")
        splits = json.loads(manifest.read_text())["splits"]
        if split not in splits:
            raise ConfigError(f"unknown split {split!r}; have {sorted(splits)}")
        return list(splits[split])
    if manifest.exists():
        return list(json.loads(manifest.read_text())["videos"])
    return sorted(p.stem for p in (data / "features").glob("*.mgfb"))


def load_dataset(data: Path, split: str | None, feature_ids) -> list[tuple]:
    out = []
    for vid in video_ids(data, split):
        bundle = ft.load_bundle(data / "features" / f"{vid}.mgfb")
        ann = ft.load_annotations(data / "annotations" / f"{vid}.json")
        if bundle.video_id != ann.video_id:
            raise ValueError(f"{vid}: feature file is for {bundle.video_id!r}, annotations for {ann.video_id!r}")
        if feature_ids is not None:
            bundle = bundle.select(feature_ids)
        out.append((bundle, ann))
    if not out:
        raise ConfigError(f"no videos found in {data}")
    return out


def _write_json(path, doc) -> None:
    container.atomic_write(path, (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode())


# -- commands ------------------------------------------------------------------

def cmd_gen_fixtures(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    spec = cfg.synthetic
    bundles, anns = ft.generate_synthetic_dataset(cfg.seed, spec)
    maps = ft.signal_maps(spec, cfg.seed)
    hits = 0
    total = 0
    for b, a in zip(bundles, anns):
        ft.save_bundle(out / "features" / f"{b.video_id}.mgfb", b)
        ft.save_annotations(out / "annotations" / f"{a.video_id}.json", a)
        for q in a.queries:
            tpl = [s * spec.noise_sigma * ft.planted_pattern(m, q.embedding)
                   for m, s in zip(maps, spec.track_strengths)]
            pred = ft.matched_filter_localize(b, tpl)
            hits += iou_many(np.array([pred.start_s]), np.array([pred.end_s]), q.gt)[0] >= 0.7
            total += 1
    ids = [b.video_id for b in bundles]
    n_test = int(round(cfg.holdout_fraction * len(ids)))
    manifest = {
        "videos": ids,
        "splits": {"train": ids[:len(ids) - n_test], "test": ids[len(ids) - n_test:]},
        "seed": cfg.seed,
        "synthetic": dataclasses.asdict(spec),
        "matched_filter_r1_at_0.7": hits / total,
    }
    _write_json(out / "manifest.json", manifest)
    print(f"wrote {len(ids)} videos to {out} (matched-filter R1@0.7 = {hits / total:.4f})")
    return 0


def cmd_pool(cfg: RunConfig, args) -> int:
    data = _data_dir(cfg)
    tensors = {}
    for bundle, _ in load_dataset(data, args.split, cfg.features):
        grid = ClipGrid(bundle.duration_s, cfg.n_clips)
        for t in bundle.tracks:
            tensors[f"pooled/{bundle.video_id}/{t.extractor_id}"] = ft.pool_to_grid(t, grid)
    container.save_tensors(args.out, tensors, {"n_clips": cfg.n_clips})
    print(f"pooled {len(tensors)} tracks onto {cfg.n_clips} clips -> {args.out}")
    return 0


def _load_checkpoint(path):
    tensors, meta = container.load_tensors(path)
    fus, model = matching.params_from_tensors(tensors, meta)
    return fus, model, meta


def cmd_train(cfg: RunConfig, args) -> int:
    data = _data_dir(cfg)
    init = None
    if args.init:
        old_fusion, old_model, _ = _load_checkpoint(args.init)
        dataset = load_dataset(data, args.split, cfg.features)
        layout = [(t.extractor_id, t.dim) for t in dataset[0][0].tracks]
        init = (fusion.warm_start_params(old_fusion, layout, cfg.seed), old_model)
        mode = "concat" if isinstance(old_fusion, fusion.ConcatFusionParams) else "weighted"
    else:
        dataset = load_dataset(data, args.split, cfg.features)
        mode = cfg.fusion_mode
    result = matching.train(dataset, mode, cfg.train, cfg.n_clips, init=init)
    tensors, meta = matching.params_to_tensors(result.fusion, result.model)
    meta.update({"n_clips": cfg.n_clips, "train": dataclasses.asdict(cfg.train)})
    container.save_tensors(args.out, tensors, meta)
    log_path = args.log or str(Path(args.out).with_suffix(".log.jsonl"))
    lines = "".join(json.dumps(r) + "\n" for r in result.log)
    container.atomic_write(log_path, lines.encode())
    last = result.log[-1]["loss"] if result.log else float("nan")
    print(f"trained {mode} model on {len(dataset)} videos; final loss {last:.5f} -> {args.out}")
    return 0


def _dump_maps(path, maps: dict, durations: dict, n_clips: int, model_id: str) -> None:
    tensors = {f"map/{vid}/{qid}": m.values for (vid, qid), m in maps.items()}
    meta = {"kind": "score_maps", "n_clips": n_clips, "model_id": model_id,
            "durations": {vid: durations[vid] for vid in sorted({v for v, _ in maps})}}
    container.save_tensors(path, tensors, meta)


def load_map_dump(path) -> tuple[dict, dict, str]:
    tensors, meta = container.load_tensors(path)
    if meta.get("kind") != "score_maps":
        raise ValueError(f"{path} is not a score-map dump")
    mask = dense_candidates(int(meta["n_clips"]))
    maps = {}
    for name, values in tensors.items():
        _, vid, qid = name.split("/", 2)
        maps[(vid, qid)] = matching.ScoreMap2D(mask.n_clips, mask, values, "combined")
    return maps, {k: float(v) for k, v in meta["durations"].items()}, str(meta["model_id"])


def cmd_predict(cfg: RunConfig, args) -> int:
    data = _data_dir(cfg)
    fus, model, meta = _load_checkpoint(args.checkpoint)
    n_clips = int(meta.get("n_clips", cfg.n_clips)) if args.n_clips is None else cfg.n_clips
    feature_ids = cfg.features if cfg.features is not None else list(fus.extractor_ids)
    dataset = load_dataset(data, args.split, feature_ids)
    model_id = args.model_id or Path(args.checkpoint).stem
    maps = {}
    durations = {}
    for bundle, ann in dataset:
        grid = ClipGrid(ann.duration_s, n_clips)
        durations[ann.video_id] = ann.duration_s
        for qid, m in matching.predict(bundle, ann, fus, model, grid).items():
            maps[(ann.video_id, qid)] = m
    evaluation.write_predictions(args.out, maps_to_predictions(maps, durations))
    if args.dump:
        _dump_maps(args.dump, maps, durations, n_clips, model_id)
    if args.candidates:
        records = []
        for (vid, qid), m in maps.items():
            grid = ClipGrid(durations[vid], n_clips)
            for c in ensemble.extract_candidates(m, grid, cfg.ensemble.top_k, model_id):
                records.append((vid, qid, c))
        ensemble.write_candidates(args.candidates, records)
    print(f"predicted {len(maps)} queries -> {args.out}")
    return 0


def cmd_fuse(cfg: RunConfig, args) -> int:
    if not args.maps and not args.candidates:
        raise ConfigError("fuse needs --maps and/or --candidates inputs")
    dumps = [load_map_dump(p) for p in args.maps or []]
    cand_files = [ensemble.read_candidates(p) for p in args.candidates or []]
    durations = {}
    for _, d, _ in dumps:
        durations.update(d)
    fused_maps = {}
    if dumps:
        keys = set(dumps[0][0])
        for path, (maps, _, _) in zip(args.maps, dumps):
            if set(maps) != keys:
                raise ValueError(f"{path}: query set differs from {args.maps[0]}")
        fused_maps = {k: ensemble.intra_fuse([d[0][k] for d in dumps]) for k in sorted(keys)}
    if not cand_files:
        preds = maps_to_predictions(fused_maps, durations)
    else:
        keys = set(fused_maps)
        for cf in cand_files:
            keys |= set(cf)
        spec = ensemble.NormalizationSpec(cfg.ensemble.normalization)
        preds = []
        for vid, qid in sorted(keys):
            outputs = {}
            if (vid, qid) in fused_maps:
                m = fused_maps[(vid, qid)]
                grid = ClipGrid(durations[vid], m.n_clips)
                outputs["intra"] = ensemble.extract_candidates(m, grid, cfg.ensemble.top_k, "intra")
            for cf in cand_files:
                for model_id, lst in cf.get((vid, qid), {}).items():
                    if model_id in outputs:
                        raise ValueError(f"model id {model_id!r} appears in more than one input")
                    outputs[model_id] = lst
            kept = ensemble.inter_fuse(outputs, spec, cfg.ensemble.top_k, cfg.ensemble.nms_iou)
            top = kept[0]
            preds.append(evaluation.Prediction(vid, qid, top.interval, top.score))
    evaluation.write_predictions(args.out, preds)
    print(f"fused {len(preds)} queries -> {args.out}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    data = _data_dir(cfg)
    gts = {}
    for vid in video_ids(data, args.split):
        ann = ft.load_annotations(data / "annotations" / f"{vid}.json")
        for q in ann.queries:
            gts[(ann.video_id, q.query_id)] = q.gt
    preds = evaluation.read_predictions(args.predictions)
    rep = evaluation.evaluate({k: p.interval for k, p in preds.items()}, gts)
    evaluation.write_report(args.out, rep)
    table = evaluation.format_table([(args.label or Path(args.predictions).stem, rep)])
    if args.table:
        container.atomic_write(args.table, table.encode())
    sys.stdout.write(table)
    return 0


def cmd_report(cfg: RunConfig, args) -> int:
    rows = []
    labels = args.labels or []
    if labels and len(labels) != len(args.reports or []):
        raise ConfigError("--labels must match --reports one to one")
    for k, path in enumerate(args.reports or []):
        with open(path, encoding="utf-8") as fh:
            rep = evaluation.EvalReport.from_json(json.load(fh))
        rows.append((labels[k] if labels else Path(path).stem, rep))
    train_log = None
    if args.log:
        with open(args.log, encoding="utf-8") as fh:
            train_log = [json.loads(line) for line in fh if line.strip()]
    figures = []
    if args.maps:
        maps, durations, model_id = load_map_dump(args.maps)
        gts = {}
        if cfg.data_dir:
            data = _data_dir(cfg)
            for vid in {v for v, _ in maps}:
                ann = ft.load_annotations(data / "annotations" / f"{vid}.json")
                gts.update({(vid, q.query_id): q.gt for q in ann.queries})
        wanted = args.queries or [qid for _, qid in sorted(maps)[:3]]
        for (vid, qid), m in sorted(maps.items()):
            if qid not in wanted:
                continue
            gt_cell = None
            if (vid, qid) in gts:
                grid = ClipGrid(durations[vid], m.n_clips)
                s, e = candidate_bounds(grid, m.mask)
                k = int(np.argmax(iou_many(s, e, gts[(vid, qid)])))
                ii, jj = m.mask.indices()
                gt_cell = (int(ii[k]), int(jj[k]))
            figures.append((f"{model_id}_{qid}", m, gt_cell))
    written = report.write_report(args.out, rows, train_log, figures)
    if rows:
        sys.stdout.write(evaluation.format_table(rows))
    for p in written:
        print(p)
    return 0


COMMANDS = {
    "gen-fixtures": cmd_gen_fixtures,
    "pool": cmd_pool,
    "train": cmd_train,
    "predict": cmd_predict,
    "fuse": cmd_fuse,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"JSON config (default: ${CONFIG_ENV})")
    common.add_argument("--seed", type=int)
    common.add_argument("--n-clips", type=int)
    common.add_argument("--fusion-mode", choices=("concat", "weighted"))
    common.add_argument("--normalization", choices=ensemble.NORMALIZATIONS)
    common.add_argument("--nms-iou", type=float)
    common.add_argument("--top-k", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mtvg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-fixtures", parents=[common], help="write a synthetic feature corpus")
    p.add_argument("--out", required=True)

    p = sub.add_parser("pool", parents=[common], help="pool feature tracks onto the clip grid")
    p.add_argument("--data")
    p.add_argument("--split")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", parents=[common], help="train fusion + scorer")
    p.add_argument("--data")
    p.add_argument("--split")
    p.add_argument("--init", help="checkpoint to warm-start from (tracks may be added)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="training log (JSON lines); default next to the checkpoint")

    p = sub.add_parser("predict", parents=[common], help="score maps and top-1 predictions")
    p.add_argument("--data")
    p.add_argument("--split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="predictions (JSON lines)")
    p.add_argument("--dump", help="also write combined score maps to this container")
    p.add_argument("--candidates", help="also write top-k candidates (JSON lines)")
    p.add_argument("--model-id")

    p = sub.add_parser("fuse", parents=[common], help="intra-/inter-framework fusion")
    p.add_argument("--maps", nargs="+", help="score-map dumps to sum")
    p.add_argument("--candidates", nargs="+", help="candidate files for NMS fusion")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", parents=[common], help="Recall@1 at IoU 0.3/0.5/0.7")
    p.add_argument("--data")
    p.add_argument("--split")
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", required=True, help="report JSON")
    p.add_argument("--table", help="also write the aligned text table here")
    p.add_argument("--label")

    p = sub.add_parser("report", parents=[common], help="tables and figures from eval reports")
    p.add_argument("--reports", nargs="+")
    p.add_argument("--labels", nargs="+")
    p.add_argument("--log", help="training log to plot")
    p.add_argument("--maps", help="score-map dump to plot")
    p.add_argument("--queries", nargs="+", help="query ids to plot from --maps")
    p.add_argument("--data", help="data directory, to mark ground truth on map plots")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"mtvg {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except matching.TrainingDiverged as exc:
        print(f"mtvg {args.command}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        print(f"mtvg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
