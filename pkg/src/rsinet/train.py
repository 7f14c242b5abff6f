"""Training loop, checkpoints, evaluation, prediction, superpixel sweep and ablation runs."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import (
    DatasetManifest,
    Sample,
    load_raster,
    save_indexed_png,
    select_channels,
    synth_dataset,
    synth_palette,
    tile_dataset,
)
from .gcn import GraphInputs
from .metrics import ConfusionMatrix, MetricsReport, confusion_accumulate
from .model import VARIANT_LABELS, VARIANTS, ModelConfig, RsiNet, build_model
from .nn import checkpoint as ckpt
from .nn import ops
from .nn.optim import AdamState, adam_step
from .nn.tensor import NonFiniteError, Tensor, backward, no_grad
from .superpixel import slic

log = logging.getLogger(__name__)

DEFAULT_SWEEP_SIZES = (100, 200, 300, 400, 500, 600)
CHECKPOINT_KIND = "rsinet-checkpoint"
LOSS_LOG = "loss.csv"
FINAL_CHECKPOINT = "final.rsin"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Run settings. Without a manifest, training uses an in-memory synthetic set."""

    manifest: str | None = None
    split: str | None = None
    variant: str = "full"
    lr: float = 1e-4
    iterations: int = 500
    batch_size: int = 1
    seed: int = 0
    superpixel_size: float = 100.0
    superpixel_mode: str = "size"
    compactness: float = 10.0
    width_mult: float = 1.0
    leaky_slope: float = 0.01
    shuffle: bool = False
    checkpoint_every: int = 0
    synth_samples: int = 8
    synth_size: int = 64
    synth_classes: int = 5
    synth_seed: int = 0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be at least 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.superpixel_mode not in ("size", "count"):
            raise ValueError("superpixel_mode is 'size' (pixels per region) or 'count' (regions per tile)")
        if self.superpixel_size <= 0 or self.width_mult <= 0:
            raise ValueError("superpixel_size and width_mult must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def region_size(self, height: int, width: int) -> float:
        if self.superpixel_mode == "count":
            return height * width / self.superpixel_size
        return min(self.superpixel_size, float(height * width))


@dataclass
class Dataset:
    samples: list[Sample]
    class_names: list[str]
    palette: list[tuple[int, int, int]]
    channel_order: tuple[int, ...] = (0, 1, 2)
    ignore_index: int = 255
    graphs: dict[int, GraphInputs] = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


def load_dataset(config: TrainConfig, split: str | None = None) -> Dataset:
    if config.manifest is None:
        samples = synth_dataset(config.synth_seed, config.synth_samples, config.synth_size, config.synth_classes)
        names = [f"class_{k}" for k in range(config.synth_classes)]
        return Dataset(samples, names, synth_palette(config.synth_classes))
    manifest = DatasetManifest.load(config.manifest)
    samples = tile_dataset(manifest, split if split is not None else config.split)
    if not samples:
        raise ValueError(f"{config.manifest}: no samples")
    return Dataset(samples, manifest.class_names, [c.color for c in manifest.classes],
                   tuple(manifest.channel_order), manifest.ignore_index)


def graph_for(image: Tensor, config: TrainConfig) -> GraphInputs:
    h, w = image.shape[1:]
    return GraphInputs.from_superpixels(slic(image, config.region_size(h, w), config.compactness))


def _graph(dataset: Dataset, i: int, model: RsiNet, config: TrainConfig) -> GraphInputs | None:
    if not model.uses_graph:
        return None
    if i not in dataset.graphs:
        dataset.graphs[i] = graph_for(dataset.samples[i].image, config)
    return dataset.graphs[i]


def model_config(config: TrainConfig, n_classes: int) -> ModelConfig:
    return ModelConfig(n_classes=n_classes, variant=config.variant, width_mult=config.width_mult,
                       leaky_slope=config.leaky_slope)


# --- checkpoints ---------------------------------------------------------------------

@dataclass
class TrainState:
    config: TrainConfig
    model: RsiNet
    optimizer: AdamState
    iteration: int
    rng: np.random.Generator
    order: list[int]
    class_names: list[str]
    palette: list[tuple[int, int, int]]
    channel_order: tuple[int, ...] = (0, 1, 2)

    def metadata(self) -> dict:
        return {
            "kind": CHECKPOINT_KIND,
            "train_config": self.config.to_dict(),
            "model_config": asdict(self.model.config),
            "iteration": self.iteration,
            "rng_state": self.rng.bit_generator.state,
            "order": list(map(int, self.order)),
            "adam": {k: getattr(self.optimizer, k) for k in ("lr", "beta1", "beta2", "eps", "step_count")},
            "classes": self.class_names,
            "palette": [list(map(int, c)) for c in self.palette],
            "channel_order": list(self.channel_order),
        }

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v.data for k, v in self.model.parameters().items()}
        out.update({f"adam_m/{k}": v for k, v in self.optimizer.first_moment.items()})
        out.update({f"adam_v/{k}": v for k, v in self.optimizer.second_moment.items()})
        return out

    def save(self, path) -> None:
        ckpt.save(path, self.tensors(), self.metadata())


def load_state(path) -> TrainState:
    tensors, meta = ckpt.load(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise ckpt.CheckpointFormatError(f"{path}: not a model checkpoint")
    config = TrainConfig.from_dict(meta["train_config"])
    mcfg = ModelConfig(**meta["model_config"])
    model = build_model(mcfg, seed=config.seed)
    model.load_parameters({k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")})
    adam = meta["adam"]
    opt = AdamState(lr=adam["lr"], beta1=adam["beta1"], beta2=adam["beta2"], eps=adam["eps"],
                    step_count=adam["step_count"])
    opt.first_moment = {k[len("adam_m/"):]: v.copy() for k, v in tensors.items() if k.startswith("adam_m/")}
    opt.second_moment = {k[len("adam_v/"):]: v.copy() for k, v in tensors.items() if k.startswith("adam_v/")}
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    return TrainState(config, model, opt, meta["iteration"], rng, list(meta["order"]), list(meta["classes"]),
                      [tuple(c) for c in meta["palette"]], tuple(meta["channel_order"]))


def checkpoint_config(path) -> TrainConfig:
    """Training config stored in a checkpoint, without building the model."""
    _, meta = ckpt.load(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise ckpt.CheckpointFormatError(f"{path}: not a model checkpoint")
    return TrainConfig.from_dict(meta["train_config"])


def load_model(path) -> tuple[RsiNet, TrainState]:
    state = load_state(path)
    return state.model, state


# --- training ------------------------------------------------------------------------

def _read_log(path: Path, upto: int) -> list[str]:
    if not path.exists():
        return []
    rows = path.read_text().splitlines()[1:]
    return [r for r in rows if int(r.split(",", 1)[0]) <= upto]


def _next_batch(state: TrainState, n: int) -> list[int]:
    batch = []
    for _ in range(state.config.batch_size):
        if not state.order:
            state.order = list(state.rng.permutation(n)) if state.config.shuffle else list(range(n))
        batch.append(int(state.order.pop(0)))
    return batch


def init_state(config: TrainConfig, dataset: Dataset) -> TrainState:
    model = build_model(model_config(config, dataset.n_classes), seed=config.seed)
    return TrainState(config, model, AdamState(lr=config.lr), 0, np.random.default_rng([config.seed, 1]), [],
                      dataset.class_names, dataset.palette, dataset.channel_order)


def train_step(state: TrainState, dataset: Dataset) -> float:
    """One optimiser step over one batch; returns the batch-mean loss."""
    model, config = state.model, state.config
    params = model.parameters()
    scale = Tensor(np.array(1.0 / config.batch_size))
    total = 0.0
    step = state.iteration + 1
    try:
        for i in _next_batch(state, len(dataset.samples)):
            sample = dataset.samples[i]
            logits = model(sample.image, _graph(dataset, i, model, config))
            labels = sample.labels if sample.owned is None else np.where(sample.owned, sample.labels,
                                                                         dataset.ignore_index)
            loss = ops.softmax_cross_entropy(logits, labels[None], dataset.ignore_index)
            total += loss.item()
            backward(ops.mul(loss, scale))
        bad = [k for k, p in params.items() if p.grad is not None and not np.all(np.isfinite(p.grad))]
        if bad:
            raise NonFiniteError(f"non-finite gradient for {bad[:3]}")
    except NonFiniteError as exc:
        raise TrainingDiverged(f"step {step}: {exc}") from exc
    for p in params.values():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    adam_step(params, state.optimizer)
    state.iteration = step
    return total / config.batch_size


def train(config: TrainConfig, out_dir, resume=None, dataset: Dataset | None = None) -> TrainState:
    """Run ``config.iterations`` steps, writing ``loss.csv`` and checkpoints under ``out_dir``.

    ``resume`` continues from a checkpoint; the remaining loss rows match an
    uninterrupted run bit for bit.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        state = load_state(resume)
        state.config = replace(state.config, iterations=config.iterations,
                               checkpoint_every=config.checkpoint_every)
        dataset = dataset or load_dataset(state.config)
        if state.model.config.n_classes != dataset.n_classes:
            raise ValueError("checkpoint class count does not match the dataset")
    else:
        dataset = dataset or load_dataset(config)
        state = init_state(config, dataset)
    (out / "config.json").write_text(json.dumps(state.config.to_dict(), indent=2) + "\n")
    log_path = out / LOSS_LOG
    rows = _read_log(log_path, state.iteration)
    with log_path.open("w", newline="") as fh:
        fh.write("step,loss\n")
        for r in rows:
            fh.write(r + "\n")
        while state.iteration < state.config.iterations:
            loss = train_step(state, dataset)
            fh.write(f"{state.iteration},{loss!r}\n")
            fh.flush()
            every = state.config.checkpoint_every
            if every and state.iteration % every == 0:
                state.save(out / f"step_{state.iteration:06d}.rsin")
            if state.iteration % 50 == 0:
                log.info("step %d loss %.5f", state.iteration, loss)
    state.save(out / FINAL_CHECKPOINT)
    return state


def read_loss_log(path) -> list[tuple[int, float]]:
    with open(path, newline="") as fh:
        return [(int(r["step"]), float(r["loss"])) for r in csv.DictReader(fh)]


# --- inference and evaluation --------------------------------------------------------

def predict_labels(model: RsiNet, image: Tensor, config: TrainConfig) -> np.ndarray:
    h, w = image.shape[1:]
    if h % 16 or w % 16:
        raise ValueError(f"image extents must be divisible by 16, got {h}x{w} (no implicit resize)")
    graph = graph_for(image, config) if model.uses_graph else None
    with no_grad():
        return model(image, graph).data[0].argmax(axis=0)


def evaluate_samples(model: RsiNet, dataset: Dataset, config: TrainConfig) -> ConfusionMatrix:
    cm = ConfusionMatrix.empty(dataset.n_classes)
    for i, sample in enumerate(dataset.samples):
        graph = _graph(dataset, i, model, config)
        with no_grad():
            pred = model(sample.image, graph).data[0].argmax(axis=0)
        keep = np.ones(sample.labels.shape, bool) if sample.owned is None else sample.owned
        confusion_accumulate(cm, pred[keep], sample.labels[keep], dataset.ignore_index)
    return cm


def evaluate(checkpoint_path, manifest_path=None, split: str | None = None) -> MetricsReport:
    """Metrics of a checkpoint on a manifest split, or on its own training data when no manifest is given."""
    model, state = load_model(checkpoint_path)
    config = state.config
    if manifest_path is not None:
        config = replace(config, manifest=str(manifest_path))
    dataset = load_dataset(config, split)
    if dataset.n_classes != model.config.n_classes:
        raise ValueError(f"manifest has {dataset.n_classes} classes, checkpoint {model.config.n_classes}")
    return MetricsReport.from_confusion(evaluate_samples(model, dataset, config), dataset.class_names)


def write_report(report: MetricsReport, out_dir, stem: str = "metrics") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.json").write_text(report.to_json() + "\n")
    (out / f"{stem}.txt").write_text(report.to_table())


def predict(checkpoint_path, image_path, out_path) -> np.ndarray:
    model, state = load_model(checkpoint_path)
    image, _ = load_raster(image_path)
    image = select_channels(image, state.channel_order)
    labels = predict_labels(model, image, state.config)
    save_indexed_png(out_path, labels, np.array(state.palette, dtype=np.uint8))
    return labels


# --- experiments ---------------------------------------------------------------------

def train_and_score(config: TrainConfig, out_dir, dataset: Dataset | None = None) -> MetricsReport:
    dataset = dataset or load_dataset(config)
    state = train(config, out_dir, dataset=dataset)
    report = MetricsReport.from_confusion(evaluate_samples(state.model, dataset, config), dataset.class_names)
    write_report(report, out_dir)
    return report


def sweep_superpixels(config: TrainConfig, out_dir, sizes=DEFAULT_SWEEP_SIZES) -> list[tuple[float, float, float | None]]:
    """Train and score one model per superpixel size under a shared seed; writes ``sweep.csv``."""
    sizes = list(sizes)
    if not sizes:
        raise ValueError("sweep needs at least one size")
    out = Path(out_dir)
    rows = []
    for size in sizes:
        cfg = replace(config, superpixel_size=float(size))
        report = train_and_score(cfg, out / f"size_{size:g}")
        rows.append((size, report.mean_f1, report.kappa))
    out.mkdir(parents=True, exist_ok=True)
    with (out / "sweep.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["size", "mean_f1", "kappa"])
        for size, f1, k in rows:
            writer.writerow([f"{size:g}", repr(f1), "" if k is None else repr(k)])
    return rows


@dataclass
class AblationResult:
    seed: int
    variant: str
    oa: float
    mean_f1: float
    kappa: float | None
    final_loss: float


def ablate(config: TrainConfig, out_dir, seeds=(0,), variants=VARIANTS) -> list[AblationResult]:
    """Train every variant per seed; writes ``ablation.csv`` and an aligned ``ablation.txt`` table."""
    out = Path(out_dir)
    results = []
    for seed in seeds:
        for variant in variants:
            cfg = replace(config, variant=variant, seed=int(seed))
            run_dir = out / f"seed_{seed}" / variant
            report = train_and_score(cfg, run_dir)
            final_loss = read_loss_log(run_dir / LOSS_LOG)[-1][1]
            results.append(AblationResult(int(seed), variant, report.oa, report.mean_f1, report.kappa, final_loss))
    out.mkdir(parents=True, exist_ok=True)
    with (out / "ablation.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["seed", "variant", "oa", "mean_f1", "kappa", "final_loss"])
        for r in results:
            writer.writerow([r.seed, r.variant, repr(r.oa), repr(r.mean_f1),
                             "" if r.kappa is None else repr(r.kappa), repr(r.final_loss)])
    (out / "ablation.txt").write_text(ablation_table(results, variants))
    return results


def ablation_table(results: list[AblationResult], variants=VARIANTS) -> str:
    """Metrics averaged over seeds, one column per variant."""
    def pct(values):
        values = [v for v in values if v is not None]
        return f"{100 * np.mean(values):.2f}" if values else "n/a"

    cols = [VARIANT_LABELS[v] for v in variants]
    rows = []
    for label, attr in (("OA (%)", "oa"), ("AVERAGE F1 SCORE (%)", "mean_f1"), ("κ (%)", "kappa")):
        rows.append([label] + [pct([getattr(r, attr) for r in results if r.variant == v]) for v in variants])
    width0 = max(len(r[0]) for r in rows)
    widths = [max(len(c), 7) for c in cols]
    lines = [" " * width0 + "".join(f"  {c:>{w}}" for c, w in zip(cols, widths))]
    lines += [f"{r[0]:<{width0}}" + "".join(f"  {v:>{w}}" for v, w in zip(r[1:], widths)) for r in rows]
    return "\n".join(lines) + "\n"


def full_dominates(results: list[AblationResult], metric: str = "oa") -> dict[int, bool]:
    """Per seed: whether the full model scores at least as well as every ablation."""
    by_seed: dict[int, dict[str, float]] = {}
    for r in results:
        by_seed.setdefault(r.seed, {})[r.variant] = getattr(r, metric)
    return {seed: all(scores["full"] >= v for k, v in scores.items() if k != "full")
            for seed, scores in by_seed.items()}
