"""scikit-learn style clustering estimator wrapping the training loop."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from infoclust import core, model as mdl, transforms as tfm
from infoclust.config import ROWS, ExperimentConfig, TermSpec, TransformSpec, default_transforms, preset
from infoclust.data import BatchIterator
from infoclust.evaluation import cluster_accuracy, head_select

EVAL_BATCH = 1024


def _as_images(X) -> np.ndarray:
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_min_samples=1)
    if X.ndim == 2:
        X = X[:, None, None, :]
    elif X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected (N, C, H, W) images, got shape {X.shape}")
    return X


def _batch_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


class InfoClustering(ClusterMixin, TransformerMixin, BaseEstimator):
    """Deep clustering by mutual-information maximization.

    The loss is a weighted combination of ``mi_xy`` (H(Y) vs H(Y|X)),
    ``mi_yy`` (MI between a sample's and its transformed version's cluster
    posteriors) and ``kl_reg`` (KL between the two posteriors) terms. Each
    term other than ``mi_xy`` is bound to a chain of named transforms.

    ``fit`` never sees labels: ``y`` is accepted for API compatibility and
    ignored. Per-epoch monitoring goes through ``callback(epoch, estimator,
    term_means)``.

    Parameters
    ----------
    terms : sequence of TermSpec, default row (a) (MI(Y, Y~) with geometric crops)
    transforms : dict of name -> TransformSpec, default the MNIST transforms
    n_clusters : number of classes; every head of this width is a primary head
    heads : cluster counts of all heads, default ``(n_clusters,)``
    warm_start : continue from the current model and epoch counter
    """

    def __init__(
        self,
        terms=None,
        transforms=None,
        n_clusters: int = 10,
        heads=None,
        epochs: int = 100,
        batch_size: int = 256,
        lr: float = 1e-4,
        eval_every: int = 5,
        conv_channels=(32, 64),
        hidden: int = 128,
        symmetrize: bool = True,
        detach_kl_target: bool = True,
        random_state: int = 0,
        warm_start: bool = False,
    ):
        self.terms = terms
        self.transforms = transforms
        self.n_clusters = n_clusters
        self.heads = heads
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.eval_every = eval_every
        self.conv_channels = conv_channels
        self.hidden = hidden
        self.symmetrize = symmetrize
        self.detach_kl_target = detach_kl_target
        self.random_state = random_state
        self.warm_start = warm_start

    # -- configuration ---------------------------------------------------------

    @classmethod
    def from_config(cls, cfg: ExperimentConfig, **kwargs) -> "InfoClustering":
        est = cls(
            terms=cfg.terms,
            transforms=dict(cfg.transforms),
            n_clusters=cfg.n_classes,
            heads=cfg.heads,
            epochs=cfg.epochs,
            batch_size=cfg.batch_size,
            lr=cfg.lr,
            eval_every=cfg.eval_every,
            conv_channels=cfg.conv_channels,
            hidden=cfg.hidden,
            symmetrize=cfg.symmetrize,
            detach_kl_target=cfg.detach_kl_target,
            random_state=cfg.seed,
            **kwargs,
        )
        # not a hyper-parameter: remembered so fitted configs keep their identity
        est._origin = {"name": cfg.name, "dataset": cfg.dataset, "out_dir": cfg.out_dir}
        return est

    @classmethod
    def from_preset(cls, name: str, dataset: str = "mnist", **overrides) -> "InfoClustering":
        return cls.from_config(preset(name, dataset, **overrides))

    def to_config(self, name: str | None = None, dataset: str | None = None) -> ExperimentConfig:
        origin = getattr(self, "_origin", {})
        name = name or origin.get("name", "custom")
        dataset = dataset or origin.get("dataset", "mnist")
        terms = tuple(self.terms) if self.terms is not None else tuple(ROWS["a"])
        if self.transforms is not None:
            transforms = dict(self.transforms)
        else:
            used = {n for t in terms for n in t.transform}
            transforms = {k: v for k, v in default_transforms(dataset).items() if k in used}
        return ExperimentConfig(
            name=name,
            dataset=dataset,
            terms=terms,
            transforms=transforms,
            n_classes=self.n_clusters,
            heads=tuple(self.heads) if self.heads is not None else (self.n_clusters,),
            seed=self.random_state,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            eval_every=self.eval_every,
            conv_channels=tuple(self.conv_channels),
            hidden=self.hidden,
            symmetrize=self.symmetrize,
            detach_kl_target=self.detach_kl_target,
            out_dir=origin.get("out_dir", "runs"),
        )

    # -- training ----------------------------------------------------------------

    def _init_model(self, in_shape) -> None:
        cfg = self.config_
        arch = mdl.Architecture(
            in_shape=in_shape,
            conv_channels=cfg.conv_channels,
            hidden=cfg.hidden,
            heads=cfg.heads,
            n_classes=cfg.n_classes,
        )
        self.model_ = mdl.init(arch, seed=cfg.seed)
        self.optimizer_ = mdl.make_optimizer(self.model_, cfg.lr)
        self.epoch_ = 0
        self.head_losses_ = [0.0] * len(cfg.heads)
        self.selected_head_ = arch.primary_heads[0]
        self.history_ = []

    def fit(self, X, y=None, callback=None):
        X = _as_images(X)
        if X.min() < 0 or X.max() > 1:
            raise ValueError("images must be scaled to [0, 1]")
        self.config_ = self.to_config()
        resume = self.warm_start and hasattr(self, "model_")
        if resume:
            if tuple(X.shape[1:]) != self.model_.arch.in_shape:
                raise ValueError("input shape differs from the warm-started model")
        else:
            self._init_model(tuple(X.shape[1:]))
        self.n_features_in_ = int(np.prod(X.shape[1:]))

        cfg = self.config_
        n = len(X)
        if n < 2:
            raise ValueError("need at least 2 samples")
        batches = BatchIterator(n, min(cfg.batch_size, n), seed=cfg.seed, drop_last=False)

        if self.epoch_ == 0 and callback is not None:
            callback(0, self, None)
        while self.epoch_ < cfg.epochs:
            epoch = self.epoch_ + 1
            term_sums = {k: 0.0 for k in cfg.term_keys}
            head_sums = np.zeros(len(cfg.heads))
            count = 0
            for b, idx in enumerate(batches.batches(epoch)):
                if len(idx) < 2:
                    continue
                head_losses = self._train_step(torch.from_numpy(X[idx]), _batch_seed(cfg.seed, epoch, b))
                for h, lv in enumerate(head_losses):
                    head_sums[h] += float(lv)
                    for k, v in lv.terms.items():
                        term_sums[k] += v / len(head_losses)
                count += 1
            self.epoch_ = epoch
            self.head_losses_ = list(head_sums / max(count, 1))
            self.selected_head_ = head_select(self.head_losses_, self.model_.arch.primary_heads)
            term_means = {k: v / max(count, 1) for k, v in term_sums.items()}
            self.history_.append({"epoch": epoch, "loss": float(np.mean(self.head_losses_)), **term_means})
            if callback is not None and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
                callback(epoch, self, term_means)
        return self

    def _transformed(self, x: torch.Tensor, chain, seed: int):
        """Apply a transform chain; returns (transformed input, mixup pair or None)."""
        cfg = self.config_
        pair = None
        for j, name in enumerate(chain):
            spec = cfg.transforms[name]
            s = _batch_seed(seed, j, sum(map(ord, name)))
            if spec.kind == "mixup":
                pair = tfm.mixup(x, spec, s)
                x = pair.mixed_input
            elif spec.kind in ("vat", "ivat"):
                x = tfm.vat_perturbation(self._all_heads, x, spec, seed=s, symmetrize=cfg.symmetrize)
            else:
                x = tfm.apply(spec, x, s)
        return x, pair

    def _all_heads(self, x: torch.Tensor) -> list[torch.Tensor]:
        return [torch.softmax(z, dim=1) for z in self.model_.head_logits(x)]

    def head_losses(self, x: torch.Tensor, seed: int = 0) -> list[core.LossValue]:
        """Composed loss of every head on one batch (with autograd graph)."""
        cfg = self.config_
        p = self._all_heads(x)
        views = {}
        for i, chain in enumerate(cfg.bindings):
            xt, pair = self._transformed(x, chain, _batch_seed(seed, i))
            pt = self._all_heads(xt)
            orig = [tfm.mixup_output(ph, pair) for ph in p] if pair is not None else p
            views[chain] = (orig, pt)

        losses = []
        for h in range(len(cfg.heads)):
            parts = {}
            for t in cfg.terms:
                if t.term == "mi_xy":
                    parts[t.key] = core.mi_xy(p[h], t.lam, validate=False).scalar
                    continue
                orig, pt = views[t.transform]
                if t.term == "mi_yy":
                    parts[t.key] = core.mi_yy(core.joint(orig[h], pt[h], cfg.symmetrize, validate=False))
                else:
                    target = orig[h].detach() if cfg.detach_kl_target else orig[h]
                    parts[t.key] = core.kl_div(target, pt[h], validate=False)
            losses.append(core.compose_loss(cfg, parts))
        return losses

    def _train_step(self, x: torch.Tensor, seed: int) -> list[core.LossValue]:
        self.model_.train()
        losses = []

        def closure(model):
            losses.extend(self.head_losses(x, seed))
            return sum(lv.scalar for lv in losses) / len(losses)

        grads = mdl.grad(self.model_, closure)
        mdl.step(self.model_, grads, self.optimizer_)
        return losses

    # -- inference ---------------------------------------------------------------

    def _batched(self, X, fn):
        check_is_fitted(self, "model_")
        X = _as_images(X)
        self.model_.eval()
        outs = []
        with torch.no_grad():
            for start in range(0, len(X), EVAL_BATCH):
                outs.append(fn(torch.tensor(X[start : start + EVAL_BATCH])))
        return outs

    def predict_proba(self, X, head: int | None = None) -> np.ndarray:
        head = self.selected_head_ if head is None else head
        self.model_._check_head(head)
        outs = self._batched(X, lambda x: torch.softmax(self.model_.head_logits(x, [head])[0], dim=1))
        return torch.cat(outs).numpy()

    def predict(self, X, head: int | None = None) -> np.ndarray:
        return self.predict_proba(X, head).argmax(axis=1)

    def predict_heads(self, X) -> np.ndarray:
        """Cluster assignments of every head, shape (n_heads, N)."""
        outs = self._batched(X, lambda x: torch.stack([z.argmax(1) for z in self.model_.head_logits(x)]))
        return torch.cat(outs, dim=1).numpy()

    def transform(self, X, tap: str = "fc") -> np.ndarray:
        """Frozen features: ``"conv"``, ``"fc"`` or ``"y"`` (selected-head posteriors)."""
        if tap == "y":
            return self.predict_proba(X)
        if tap not in ("conv", "fc"):
            raise ValueError(f"unknown tap {tap!r}")
        return torch.cat(self._batched(X, lambda x: self.model_.features(x)[tap])).numpy()

    def score(self, X, y, head: int | None = None) -> float:
        preds = self.predict(X, head)
        k = self.model_.arch.heads[self.selected_head_ if head is None else head]
        return cluster_accuracy(preds, np.asarray(y), k, self.n_clusters).accuracy

    @classmethod
    def from_model(cls, model: mdl.ClusterNet, cfg: ExperimentConfig | None = None, meta: dict | None = None):
        """Wrap an already trained network (e.g. loaded from a checkpoint)."""
        est = cls.from_config(cfg) if cfg is not None else cls(n_clusters=model.arch.n_classes, heads=model.arch.heads)
        est.config_ = cfg if cfg is not None else est.to_config()
        est.model_ = model
        est.optimizer_ = mdl.make_optimizer(model, est.lr)
        meta = meta or {}
        est.epoch_ = int(meta.get("epoch", 0))
        est.head_losses_ = list(meta.get("head_losses", [0.0] * len(model.arch.heads)))
        est.selected_head_ = int(meta.get("selected_head", model.arch.primary_heads[0]))
        est.history_ = []
        est.n_features_in_ = int(np.prod(model.arch.in_shape))
        return est


__all__ = ["InfoClustering", "TermSpec", "TransformSpec"]
