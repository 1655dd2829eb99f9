"""Experiment runner: training runs, seed sweeps, checkpoints and downstream modes.

Labels never reach the estimator. The runner holds them in an evaluation
callback that only reads model predictions, so poisoning the labels changes
the logged accuracies and nothing else.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from infoclust import model as mdl, transforms as tfm
from infoclust.config import ExperimentConfig, default_transforms
from infoclust.data import BatchIterator, Dataset, load_dataset
from infoclust.estimator import InfoClustering
from infoclust.evaluation import cluster_accuracy, linear_probe, train_test_split_indices

log = logging.getLogger(__name__)

CHECKPOINT = "checkpoint.ickp"
METRICS = "metrics.csv"
CONFIG = "config.json"
SUMMARY = "summary.json"


def dataset_for(cfg: ExperimentConfig, path=None) -> Dataset:
    if cfg.dataset == "blobs":
        return load_dataset("blobs", classes=cfg.n_classes)
    return load_dataset(cfg.dataset, path)


# -- metrics -------------------------------------------------------------------


def metrics_header(cfg: ExperimentConfig, primary_heads) -> list[str]:
    return (
        ["epoch"]
        + [f"term:{k}" for k in cfg.term_keys]
        + [f"head:{h}/acc" for h in primary_heads]
        + ["selected_acc", "seconds"]
    )


@dataclass
class MetricsRecord:
    epoch: int
    terms: dict[str, float] | None
    head_acc: dict[int, float]
    selected_acc: float
    seconds: float

    def row(self, cfg: ExperimentConfig) -> list[str]:
        terms = [f"{self.terms[k]:.6f}" if self.terms else "" for k in cfg.term_keys]
        accs = [f"{self.head_acc[h]:.6f}" for h in sorted(self.head_acc)]
        return [str(self.epoch), *terms, *accs, f"{self.selected_acc:.6f}", f"{self.seconds:.3f}"]


class Evaluator:
    """Training callback that scores every primary head against held-back labels."""

    def __init__(self, images: np.ndarray, labels: np.ndarray, n_classes: int):
        self.images = images
        self.labels = labels
        self.n_classes = n_classes

    def __call__(self, est: InfoClustering) -> tuple[dict[int, float], float]:
        arch = est.model_.arch
        preds = est.predict_heads(self.images)
        accs = {h: cluster_accuracy(preds[h], self.labels, arch.heads[h], self.n_classes).accuracy for h in arch.primary_heads}
        return accs, accs[est.selected_head_]


# -- optimizer state in the checkpoint ----------------------------------------------


def optimizer_tensors(model: nn.Module, optimizer: torch.optim.Optimizer) -> dict[str, torch.Tensor]:
    out = {}
    for name, p in model.named_parameters():
        state = optimizer.state.get(p)
        if not state:
            continue
        out[f"adam/{name}/step"] = torch.as_tensor(float(state["step"])).reshape(1)
        out[f"adam/{name}/exp_avg"] = state["exp_avg"]
        out[f"adam/{name}/exp_avg_sq"] = state["exp_avg_sq"]
    return out


def restore_optimizer(model: nn.Module, optimizer: torch.optim.Optimizer, extra: dict[str, torch.Tensor]) -> None:
    for name, p in model.named_parameters():
        key = f"adam/{name}"
        if f"{key}/step" not in extra:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(extra[f"{key}/step"][0])),
            "exp_avg": extra[f"{key}/exp_avg"].to(p.dtype).clone(),
            "exp_avg_sq": extra[f"{key}/exp_avg_sq"].to(p.dtype).clone(),
        }


def save_run(path, est: InfoClustering, seconds: float, dataset: str) -> None:
    meta = {
        "config": est.config_.to_dict(),
        "dataset": dataset,
        "epoch": est.epoch_,
        "selected_head": est.selected_head_,
        "head_losses": [float(v) for v in est.head_losses_],
        "seconds": seconds,
    }
    mdl.save_checkpoint(path, est.model_, meta, optimizer_tensors(est.model_, est.optimizer_))


def load_run(path) -> InfoClustering:
    model, meta, extra = mdl.load_checkpoint(path)
    cfg = ExperimentConfig.from_dict(meta["config"]) if "config" in meta else None
    est = InfoClustering.from_model(model, cfg, meta)
    restore_optimizer(est.model_, est.optimizer_, extra)
    return est


# -- training runs -------------------------------------------------------------------


@dataclass
class RunResult:
    out_dir: Path
    records: list[MetricsRecord]
    estimator: InfoClustering = field(repr=False)

    @property
    def final(self) -> MetricsRecord:
        return self.records[-1]


def _read_rows(path: Path, header: list[str], upto: int) -> list[list[str]]:
    with path.open(newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != header:
        raise ValueError(f"{path}: header does not match the configuration")
    return [r for r in rows[1:] if int(r[0]) <= upto]


def run(cfg: ExperimentConfig, dataset: Dataset | None = None, out_dir=None, resume: bool = False) -> RunResult:
    """Train one configuration, writing metrics, config and checkpoint to ``out_dir``."""
    cfg.validate()
    dataset = dataset if dataset is not None else dataset_for(cfg)
    out = Path(out_dir if out_dir is not None else Path(cfg.out_dir) / f"{cfg.name}-seed{cfg.seed}")
    out.mkdir(parents=True, exist_ok=True)
    ckpt, metrics = out / CHECKPOINT, out / METRICS

    evaluator = Evaluator(dataset.images, dataset.evaluation_labels(), dataset.n_classes)
    images = dataset.images
    prior_rows: list[list[str]] = []
    offset = 0.0
    if resume and ckpt.exists():
        est = load_run(ckpt)
        if est.config_.with_(epochs=cfg.epochs, out_dir=cfg.out_dir) != cfg:
            raise ValueError("checkpoint was written by a different configuration")
        est.set_params(epochs=cfg.epochs, warm_start=True)
        offset = float(mdl.read_checkpoint(ckpt)[0]["meta"].get("seconds", 0.0))
        header = metrics_header(cfg, est.model_.arch.primary_heads)
        prior_rows = _read_rows(metrics, header, est.epoch_) if metrics.exists() else []
    else:
        est = InfoClustering.from_config(cfg)
    cfg.save(out / CONFIG)

    records: list[MetricsRecord] = []
    start = time.perf_counter()
    state = {"header": None}

    def on_epoch(epoch: int, e: InfoClustering, terms):
        if state["header"] is None:
            state["header"] = metrics_header(cfg, e.model_.arch.primary_heads)
            with metrics.open("w", newline="") as f:
                w = csv.writer(f)
                w.writerow(state["header"])
                w.writerows(prior_rows)
        accs, selected = evaluator(e)
        seconds = offset + time.perf_counter() - start
        rec = MetricsRecord(epoch, terms, accs, selected, seconds)
        records.append(rec)
        save_run(ckpt, e, seconds, dataset.name)
        with metrics.open("a", newline="") as f:
            csv.writer(f).writerow(rec.row(cfg))
        log.info("epoch %d selected_acc %.4f", epoch, selected)

    try:
        est.fit(images, callback=on_epoch)
    except FloatingPointError as err:
        raise RuntimeError(f"{cfg.name} (seed {cfg.seed}) aborted at epoch {est.epoch_ + 1}: {err}") from err
    return RunResult(out, records, est)


def run_seeds(cfg: ExperimentConfig, n_seeds: int, dataset: Dataset | None = None, out_dir=None, resume: bool = False) -> dict:
    """Independent runs with seeds ``cfg.seed .. cfg.seed + n - 1`` and a mean/std summary."""
    if n_seeds < 1:
        raise ValueError("need at least one seed")
    dataset = dataset if dataset is not None else dataset_for(cfg)
    out = Path(out_dir if out_dir is not None else Path(cfg.out_dir) / cfg.name)
    finals = {}
    for i in range(n_seeds):
        seed = cfg.seed + i
        result = run(cfg.with_(seed=seed), dataset, out / f"seed{seed}", resume=resume)
        if result.records:
            finals[seed] = result.final.selected_acc
        else:
            finals[seed] = _last_logged_accuracy(out / f"seed{seed}" / METRICS)
    accs = np.array(list(finals.values()))
    summary = {
        "config": cfg.name,
        "dataset": dataset.name,
        "seeds": list(finals),
        "selected_acc": list(accs),
        "mean": float(accs.mean()),
        "std": float(accs.std(ddof=1)) if len(accs) > 1 else 0.0,
    }
    (out / SUMMARY).write_text(json.dumps(summary, indent=2))
    return summary


def _last_logged_accuracy(path: Path) -> float:
    with path.open(newline="") as f:
        rows = list(csv.DictReader(f))
    return float(rows[-1]["selected_acc"])


# -- checkpoint consumers -------------------------------------------------------------


def _checkpoint_dataset(path, dataset: Dataset | str | None) -> Dataset:
    if isinstance(dataset, Dataset):
        return dataset
    meta = mdl.read_checkpoint(path)[0]["meta"]
    name = dataset or meta.get("dataset")
    if name is None:
        raise ValueError("checkpoint does not record its dataset; pass one explicitly")
    if name == "blobs":
        return load_dataset("blobs", classes=int(meta.get("config", {}).get("n_classes", 3)))
    return load_dataset(name)


def evaluate(checkpoint, dataset: Dataset | str | None = None) -> dict:
    """Accuracy of every primary head and of the selected head."""
    est = load_run(checkpoint)
    ds = _checkpoint_dataset(checkpoint, dataset)
    accs, selected = Evaluator(ds.images, ds.evaluation_labels(), ds.n_classes)(est)
    return {"heads": {str(h): a for h, a in accs.items()}, "selected_head": est.selected_head_, "selected_acc": selected}


def probe(checkpoint, dataset: Dataset | str | None = None, tap: str = "fc", seed: int = 0, epochs: int = 500) -> dict:
    """Linear-probe accuracy on frozen features, next to the raw-pixel baseline."""
    est = load_run(checkpoint)
    ds = _checkpoint_dataset(checkpoint, dataset)
    labels = ds.evaluation_labels()
    split = train_test_split_indices(len(ds), seed=seed)
    feats = est.transform(ds.images, tap=tap)
    return {
        "tap": tap,
        "accuracy": linear_probe(feats, labels, split, epochs=epochs, seed=seed),
        "raw_pixels": linear_probe(ds.images.reshape(len(ds), -1), labels, split, epochs=epochs, seed=seed),
    }


class Classifier(nn.Module):
    """Encoder of a clustering network with a fresh supervised head."""

    def __init__(self, encoder: mdl.ClusterNet, n_classes: int, seed: int = 0):
        super().__init__()
        self.encoder = encoder
        arch = encoder.arch
        width = arch.hidden if arch.hidden else int(np.prod(arch.conv_output_shape()))
        g = torch.Generator().manual_seed(seed)
        self.head = nn.Linear(width, n_classes)
        bound = 1.0 / np.sqrt(width)
        with torch.no_grad():
            self.head.weight.copy_(torch.rand(self.head.weight.shape, generator=g) * 2 * bound - bound)
            self.head.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder.features(x)["fc"])


@dataclass
class FinetuneResult:
    test_accuracy: float
    history: list[float]
    pretrained: bool
    augment: bool


def finetune(
    checkpoint,
    dataset: Dataset | str | None = None,
    augment: bool = False,
    epochs: int = 10,
    n_labels: int | None = None,
    scratch: bool = False,
    lr: float = 1e-3,
    batch_size: int = 128,
    seed: int = 0,
) -> FinetuneResult:
    """Supervised training from the checkpoint's encoder, or from a fresh one when ``scratch``.

    A seeded 20% of the data is held out for testing; ``n_labels`` caps the
    labelled training subset. ``history`` holds the test accuracy after every
    epoch, starting with the untrained classifier.
    """
    pretrained, meta, _ = mdl.load_checkpoint(checkpoint)
    ds = _checkpoint_dataset(checkpoint, dataset)
    if tuple(ds.image_shape) != pretrained.arch.in_shape:
        raise ValueError(f"checkpoint expects images of shape {pretrained.arch.in_shape}, dataset has {ds.image_shape}")
    encoder = mdl.init(pretrained.arch, seed=seed) if scratch else pretrained
    net = Classifier(encoder, ds.n_classes, seed=seed)
    opt = torch.optim.Adam(net.parameters(), lr=lr)

    labels = ds.evaluation_labels()
    train, test = train_test_split_indices(len(ds), seed=seed)
    if n_labels is not None:
        train = train[:n_labels]
    x_test, y_test = torch.tensor(ds.images[test]), torch.from_numpy(labels[test].copy())
    geo = default_transforms(ds.name)["geo"] if augment else None

    def accuracy() -> float:
        net.eval()
        with torch.no_grad():
            return float((net(x_test).argmax(1) == y_test).float().mean())

    history = [accuracy()]
    batches = BatchIterator(len(train), batch_size, seed=seed)
    for epoch in range(1, epochs + 1):
        net.train()
        for b, idx in enumerate(batches.batches(epoch)):
            x = torch.tensor(ds.images[train[idx]])
            if geo is not None:
                x = tfm.geometric(x, geo, seed=int(np.random.SeedSequence([seed, epoch, b]).generate_state(1)[0]))
            loss = F.cross_entropy(net(x), torch.from_numpy(labels[train[idx]].copy()))
            opt.zero_grad()
            loss.backward()
            opt.step()
        history.append(accuracy())
    return FinetuneResult(history[-1], history, not scratch, augment)


@dataclass
class Montage:
    head: int
    grid: np.ndarray  # (K, S) sample indices, -1 marks a blank cell
    path: Path | None


def _tile(images: np.ndarray, grid: np.ndarray, pad: int = 1) -> np.ndarray:
    c, h, w = images.shape[1:]
    rows, cols = grid.shape
    canvas = np.zeros((rows * (h + pad) + pad, cols * (w + pad) + pad, c), dtype=np.float32)
    for i in range(rows):
        for j in range(cols):
            if grid[i, j] >= 0:
                y, x = pad + i * (h + pad), pad + j * (w + pad)
                canvas[y : y + h, x : x + w] = images[grid[i, j]].transpose(1, 2, 0)
    canvas = (np.clip(canvas, 0, 1) * 255).round().astype(np.uint8)
    return canvas[..., 0] if c == 1 else canvas


def montage(checkpoint, dataset: Dataset | str | None = None, per_cluster: int = 8, out_dir=None, seed: int = 0, heads=None) -> list[Montage]:
    """Grid of random members of each cluster, one PNG per head.

    Row ``i`` holds up to ``per_cluster`` samples whose argmax cluster is
    ``i``; clusters with fewer members leave blank cells, empty ones a blank
    row.
    """
    if per_cluster < 1:
        raise ValueError("per_cluster must be at least 1")
    est = load_run(checkpoint)
    ds = _checkpoint_dataset(checkpoint, dataset)
    out = Path(out_dir) if out_dir is not None else Path(checkpoint).parent
    rng = np.random.default_rng(seed)
    preds = est.predict_heads(ds.images)
    heads = range(len(est.model_.arch.heads)) if heads is None else heads
    results = []
    for h in heads:
        k = est.model_.arch.heads[h]
        grid = np.full((k, per_cluster), -1, dtype=np.int64)
        for c in range(k):
            members = np.flatnonzero(preds[h] == c)
            pick = rng.choice(members, size=min(per_cluster, len(members)), replace=False)
            grid[c, : len(pick)] = pick
        path = out / f"montage_head{h}.png"
        out.mkdir(parents=True, exist_ok=True)
        Image.fromarray(_tile(ds.images, grid)).save(path)
        results.append(Montage(h, grid, path))
    return results
