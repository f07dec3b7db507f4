"""End-to-end segmentation-by-classifier experiments and their reports.

Experiment 1 trains each classifier, extracts Grad-CAMs for the abnormal ROIs
and scores them against the truth masks with averaged mean-Dice. Experiment 2
retrains the same architectures from scratch on CAM-filtered, truth-mask-filtered
and (optionally) inverse-mask-filtered ROIs.

Output layout under ``out_dir``::

    data/                      synthetic dataset (when generated)
    checkpoints/<arch>.ckpt    first-stage classifiers
    checkpoints/<arch>-<kind>.ckpt
    cams/<arch>/<id>.png       8-bit Grad-CAMs of abnormal ROIs
    filtered/<kind>/...        filtered ROIs used for retraining
    report.json, report.txt    results (deterministic)
    run.json                   timestamps and durations (not part of the report)
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import __version__
from .data import (
    ABNORMAL,
    NORMAL,
    DatasetManifest,
    RoiSample,
    SynthConfig,
    cam_filter,
    fit_to_size,
    inverse_mask_filter,
    load_manifest,
    load_samples,
    mask_filter,
    random_mask_assign,
    synth_generate,
)
from .gradcam import make_cam
from .imaging import load_gray, save_png
from .metrics import averaged_mean_dice
from .network import (
    Checkpoint,
    TrainConfig,
    build_network,
    load_checkpoint,
    preset,
    save_checkpoint,
    stratified_split,
    train,
)
from .repro import derive_rng, derive_seed, worker_count

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
REPORT_VERSION = 1
ABNORMAL_CLASS = ABNORMAL


# -- configuration -----------------------------------------------------------------

@dataclass
class ExperimentConfig:
    architectures: list[str] = field(default_factory=lambda: ["gap-head-small", "deep-head-small"])
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: SynthConfig | None = field(default_factory=SynthConfig)
    manifest: str | None = None
    image_size: int = 64
    out_dir: Path = Path("runs/default")
    seed: int = 0
    rectified_cam: bool = False
    run_inverse_ablation: bool = True

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)
        if not self.architectures:
            raise ValueError("config needs at least one architecture")
        for arch in self.architectures:
            preset(arch, self.image_size)
        if self.manifest is None and self.synthetic is None:
            raise ValueError("config needs either a manifest path or a synthetic dataset section")

    def to_dict(self) -> dict:
        return {
            "version": CONFIG_VERSION,
            "seed": self.seed,
            "out_dir": str(self.out_dir),
            "architectures": list(self.architectures),
            "image_size": self.image_size,
            "dataset": {"manifest": self.manifest} if self.manifest else
                       {"synthetic": _plain(dataclasses.asdict(self.synthetic))},
            "train": dataclasses.asdict(self.train),
            "flags": {"rectified_cam": self.rectified_cam, "run_inverse_ablation": self.run_inverse_ablation},
        }


def _plain(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def config_from_dict(d: dict) -> ExperimentConfig:
    version = d.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ValueError(f"config version {version} not supported (expected {CONFIG_VERSION})")
    unknown = set(d) - {"version", "seed", "out_dir", "architectures", "image_size", "dataset", "train", "flags"}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    seed = int(d.get("seed", 0))
    image_size = int(d.get("image_size", 64))
    dataset = d.get("dataset") or {"synthetic": {}}
    manifest = dataset.get("manifest")
    synthetic = None
    if manifest is None:
        syn = dict(dataset.get("synthetic") or {})
        syn.setdefault("seed", seed)
        syn.setdefault("image_size", image_size)
        synthetic = SynthConfig(**syn)
    flags = d.get("flags") or {}
    kwargs = {}
    if "architectures" in d:
        kwargs["architectures"] = list(d["architectures"])
    if "out_dir" in d:
        kwargs["out_dir"] = Path(d["out_dir"])
    return ExperimentConfig(
        train=TrainConfig(**(d.get("train") or {})),
        synthetic=synthetic,
        manifest=manifest,
        image_size=image_size,
        seed=seed,
        rectified_cam=bool(flags.get("rectified_cam", False)),
        run_inverse_ablation=bool(flags.get("run_inverse_ablation", True)),
        **kwargs,
    )


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as f:
        d = yaml.safe_load(f) or {}
    if not isinstance(d, dict):
        raise ValueError(f"{path}: config must be a mapping")
    return config_from_dict(d)


# -- reports -----------------------------------------------------------------------

COLUMNS = ("val_acc", "dice", "cam_val_acc", "mask_val_acc", "inverse_val_acc")
HEADERS = {"val_acc": "val_acc", "dice": "Dice", "cam_val_acc": "CAM_val_acc",
           "mask_val_acc": "mask_val_acc", "inverse_val_acc": "inverse_val_acc"}


@dataclass
class ReportRow:
    arch: str
    val_acc: float
    dice: float
    cam_val_acc: float | None = None
    mask_val_acc: float | None = None
    inverse_val_acc: float | None = None


@dataclass
class ExperimentReport:
    experiment: int
    rows: list[ReportRow]
    sort_key: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for r in self.rows:
            for col in COLUMNS:
                v = getattr(r, col)
                if v is not None and not 0.0 <= v <= 1.0:
                    raise ValueError(f"{r.arch}: {col}={v} outside [0, 1]")
        self.rows = sorted(self.rows, key=lambda r: (-getattr(r, self.sort_key), r.arch))

    def row(self, arch: str) -> ReportRow:
        return next(r for r in self.rows if r.arch == arch)


def render_report(report: ExperimentReport, fmt: str = "json") -> bytes:
    if fmt == "json":
        d = {
            "version": REPORT_VERSION,
            "experiment": report.experiment,
            "sort_key": report.sort_key,
            "meta": report.meta,
            "rows": [dataclasses.asdict(r) for r in report.rows],
        }
        return (json.dumps(d, indent=2, sort_keys=True) + "\n").encode("utf-8")
    if fmt == "text":
        cols = [c for c in COLUMNS if any(getattr(r, c) is not None for r in report.rows)]
        header = ["Classifier"] + [HEADERS[c] for c in cols]
        body = [[r.arch] + ["-" if getattr(r, c) is None else f"{getattr(r, c):.3f}" for c in cols]
                for r in report.rows]
        widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
        line = lambda cells: "  ".join(  # noqa: E731
            c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))
        title = f"Experiment #{report.experiment}. Descending sort by {HEADERS[report.sort_key]}."
        rule = "-" * len(line(header))
        return "\n".join([title, rule, line(header), rule, *map(line, body), rule, ""]).encode("utf-8")
    raise ValueError(f"unknown report format {fmt!r}; expected 'json' or 'text'")


def parse_report(raw: bytes) -> ExperimentReport:
    d = json.loads(raw.decode("utf-8"))
    if d.get("version") != REPORT_VERSION:
        raise ValueError(f"unsupported report version {d.get('version')}")
    return ExperimentReport(
        experiment=d["experiment"],
        rows=[ReportRow(**r) for r in d["rows"]],
        sort_key=d["sort_key"],
        meta=d["meta"],
    )


def write_report(report: ExperimentReport, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_bytes(render_report(report, "json"))
    (out_dir / "report.txt").write_bytes(render_report(report, "text"))


# -- dataset -----------------------------------------------------------------------

@dataclass
class PreparedData:
    manifest: DatasetManifest
    manifest_rel: str
    samples: list[RoiSample]
    split: tuple[np.ndarray, np.ndarray]
    dataset_hash: str


def dataset_hash(manifest: DatasetManifest) -> str:
    h = hashlib.sha256()
    for r in manifest.records:
        h.update(json.dumps(dataclasses.asdict(r), sort_keys=True).encode())
        for rel in (r.image_path, r.mask_path):
            if rel is not None:
                h.update(manifest.resolve(rel).read_bytes())
    return h.hexdigest()


def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    if cfg.manifest is not None:
        manifest_path = Path(cfg.manifest)
        manifest_rel = str(cfg.manifest)
    else:
        manifest_path = cfg.out_dir / "data" / "manifest.jsonl"
        manifest_rel = "data/manifest.jsonl"
        synth_generate(cfg.synthetic, manifest_path.parent)
    manifest = load_manifest(manifest_path)
    samples = [fit_to_size(s, cfg.image_size) for s in load_samples(manifest)]
    labels = [s.label for s in samples]
    if set(labels) != {NORMAL, ABNORMAL}:
        raise ValueError("dataset must contain normal and abnormal ROIs")
    if any(s.label == ABNORMAL and (s.mask is None or not s.mask.any()) for s in samples):
        raise ValueError("every abnormal ROI needs a non-empty truth mask")
    splits = [r.split for r in manifest.records]
    if all(s in ("train", "val") for s in splits):
        split = (np.flatnonzero(np.array(splits) == "train"), np.flatnonzero(np.array(splits) == "val"))
    else:
        split = stratified_split(labels, cfg.train.split, derive_seed(cfg.seed, "split"))
    return PreparedData(manifest, manifest_rel, samples, split, dataset_hash(manifest))


# -- stages ------------------------------------------------------------------------

def _train_arch(cfg: ExperimentConfig, arch: str, samples, split, stage: str, data_hash: str) -> Checkpoint:
    net = build_network(preset(arch, cfg.image_size), derive_seed(cfg.seed, "init", stage, arch), cfg.train.precision)
    tc = dataclasses.replace(cfg.train, seed=derive_seed(cfg.seed, "train", stage, arch))
    log.info("training %s on %s ROIs", arch, stage)
    try:
        ckpt = train(net, samples, tc, split)
    except Exception as e:
        raise RuntimeError(f"training {arch} on {stage} ROIs failed: {e}") from e
    ckpt.extra = {"stage": stage, "master_seed": cfg.seed, "dataset_hash": data_hash,
                  "train_config": dataclasses.asdict(cfg.train)}
    return ckpt


def _ckpt_path(cfg: ExperimentConfig, arch: str, stage: str = "original") -> Path:
    name = arch if stage == "original" else f"{arch}-{stage}"
    return cfg.out_dir / "checkpoints" / f"{name}.ckpt"


def first_stage(cfg: ExperimentConfig, arch: str, data: PreparedData, reuse: bool = False) -> Checkpoint:
    """Train (or reload a matching) classifier on the original ROIs."""
    path = _ckpt_path(cfg, arch)
    if reuse and path.exists():
        ckpt = load_checkpoint(path)
        if ckpt.extra.get("dataset_hash") == data.dataset_hash and ckpt.extra.get("master_seed") == cfg.seed \
                and ckpt.extra.get("train_config") == dataclasses.asdict(cfg.train):
            log.info("reusing %s", path)
            return ckpt
    ckpt = _train_arch(cfg, arch, data.samples, data.split, "original", data.dataset_hash)
    save_checkpoint(ckpt, path)
    return ckpt


def compute_cams(ckpt: Checkpoint, samples: Sequence[RoiSample], rectify: bool = False, c: int = ABNORMAL_CLASS):
    """Grad-CAMs (double precision) for ``samples``, in order; parallel over ``$CAMSEG_THREADS``."""
    net = ckpt.network().astype(np.float64)

    def one(s):
        return make_cam(net, s.image, c, rectify=rectify, provenance={"sample": s.id, "arch": ckpt.spec.name})

    workers = worker_count()
    if workers == 1:
        return [one(s) for s in samples]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, samples))


def _meta(cfg: ExperimentConfig, data: PreparedData) -> dict:
    return {"seed": cfg.seed, "dataset_hash": data.dataset_hash, "manifest": data.manifest_rel,
            "tool_version": __version__, "rectified_cam": cfg.rectified_cam,
            "architectures": list(cfg.architectures)}


def _write_run_info(cfg: ExperimentConfig, started: float, stages: dict) -> None:
    info = {"started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S"), "durations_s": stages}
    (cfg.out_dir / "run.json").write_text(json.dumps(info, indent=2) + "\n")
    (cfg.out_dir / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


def _exp1_rows(cfg: ExperimentConfig, data: PreparedData, reuse: bool, timings: dict):
    rows, ckpts = {}, {}
    abnormal = [s for s in data.samples if s.label == ABNORMAL]
    for arch in cfg.architectures:
        t0 = time.perf_counter()
        ckpt = first_stage(cfg, arch, data, reuse=reuse)
        cams = compute_cams(ckpt, abnormal, rectify=cfg.rectified_cam)
        for s, cam in zip(abnormal, cams):
            save_png(cfg.out_dir / "cams" / arch / f"{s.id}.png", cam.gray)
        dice = averaged_mean_dice((s.mask, cam.gray) for s, cam in zip(abnormal, cams))
        rows[arch] = ReportRow(arch, val_acc=ckpt.best_val_acc, dice=dice)
        ckpts[arch] = ckpt
        timings[f"exp1/{arch}"] = round(time.perf_counter() - t0, 3)
    return rows, ckpts


def experiment1(cfg: ExperimentConfig) -> ExperimentReport:
    started = time.time()
    timings: dict[str, float] = {}
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    data = prepare_data(cfg)
    rows, _ = _exp1_rows(cfg, data, reuse=False, timings=timings)
    report = ExperimentReport(1, list(rows.values()), "val_acc", _meta(cfg, data))
    write_report(report, cfg.out_dir)
    _write_run_info(cfg, started, timings)
    return report


def _filtered(samples, images, kind: str, out_dir: Path) -> list[RoiSample]:
    out = []
    for s, img in zip(samples, images):
        save_png(out_dir / "filtered" / kind / f"{s.id}.png", img)
        out.append(dataclasses.replace(s, image=img))
    return out


def experiment2(cfg: ExperimentConfig, reuse: bool = True) -> ExperimentReport:
    """Experiment 1 plus retraining on filtered ROIs; first-stage checkpoints are reused when they match."""
    started = time.time()
    timings: dict[str, float] = {}
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    data = prepare_data(cfg)
    rows, ckpts = _exp1_rows(cfg, data, reuse=reuse, timings=timings)
    samples = data.samples

    # truth masks for abnormal ROIs, borrowed masks for normal ones
    pool = [s.mask for s in samples if s.label == ABNORMAL]
    normals = [s for s in samples if s.label == NORMAL]
    borrowed = {s.id: s.mask for s in random_mask_assign(normals, pool, derive_rng(cfg.seed, "borrow-masks"))}
    masks = [borrowed.get(s.id, s.mask) for s in samples]
    mask_set = _filtered(samples, [mask_filter(s.image, m) for s, m in zip(samples, masks)], "mask", cfg.out_dir)
    inverse_set = None
    if cfg.run_inverse_ablation:
        inverse_set = _filtered(samples, [inverse_mask_filter(s.image, m) for s, m in zip(samples, masks)],
                                "inverse", cfg.out_dir)

    for arch in cfg.architectures:
        t0 = time.perf_counter()
        cams = compute_cams(ckpts[arch], samples, rectify=cfg.rectified_cam)
        cam_set = _filtered(samples, [cam_filter(s.image, c) for s, c in zip(samples, cams)], f"cam/{arch}", cfg.out_dir)
        accs = {}
        for kind, ds in (("cam", cam_set), ("mask", mask_set), ("inverse", inverse_set)):
            if ds is None:
                continue
            ck = _train_arch(cfg, arch, ds, data.split, kind, data.dataset_hash)
            save_checkpoint(ck, _ckpt_path(cfg, arch, kind))
            accs[kind] = ck.best_val_acc
        rows[arch] = dataclasses.replace(rows[arch], cam_val_acc=accs["cam"], mask_val_acc=accs["mask"],
                                         inverse_val_acc=accs.get("inverse"))
        timings[f"exp2/{arch}"] = round(time.perf_counter() - t0, 3)

    report = ExperimentReport(2, list(rows.values()), "dice", _meta(cfg, data))
    write_report(report, cfg.out_dir)
    _write_run_info(cfg, started, timings)
    return report


def recompute_metrics(out_dir) -> ExperimentReport:
    """Rebuild the Dice column from persisted CAM PNGs and the manifest, without retraining."""
    out_dir = Path(out_dir)
    report = parse_report((out_dir / "report.json").read_bytes())
    mpath = Path(report.meta["manifest"])
    manifest = load_manifest(mpath if mpath.is_absolute() or mpath.exists() else out_dir / mpath)
    abnormal = [r for r in manifest.records if r.label == ABNORMAL]
    rows = []
    for row in report.rows:
        pairs = []
        for r in abnormal:
            gray = load_gray(out_dir / "cams" / row.arch / f"{r.id}.png")
            mask = load_gray(manifest.resolve(r.mask_path)) > 0
            if mask.shape != gray.shape:
                from .imaging import resize_nearest
                mask = resize_nearest(mask, *gray.shape)
            pairs.append((mask, gray))
        rows.append(dataclasses.replace(row, dice=averaged_mean_dice(pairs)))
    return ExperimentReport(report.experiment, rows, report.sort_key, report.meta)
