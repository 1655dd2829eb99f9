"""Input transformations T(X) used to build the transformed posteriors.

Image batches are (B, C, H, W) tensors with values in [0, 1]. Every random
transform takes an explicit integer seed (or a ``torch.Generator``) and is
bit-for-bit reproducible given it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import betaincinv

from infoclust import core
from infoclust.config import TransformSpec


def _generator(seed) -> torch.Generator:
    if isinstance(seed, torch.Generator):
        return seed
    return torch.Generator().manual_seed(int(seed))


def _images(batch) -> torch.Tensor:
    x = batch if isinstance(batch, torch.Tensor) else torch.as_tensor(np.asarray(batch), dtype=torch.float32)
    if x.ndim != 4:
        raise ValueError(f"expected a (B, C, H, W) batch, got shape {tuple(x.shape)}")
    if x.shape[0] < 1:
        raise ValueError("empty batch")
    return x


def _require(spec: TransformSpec, *kinds: str) -> None:
    if spec.kind not in kinds:
        raise ValueError(f"transform spec of kind {spec.kind!r} where {kinds} was expected")


def geometric(batch, spec: TransformSpec, seed=0) -> torch.Tensor:
    """Random crop, resize back to H x W, horizontal flip and colour jitter."""
    _require(spec, "geometric")
    x = _images(batch)
    g = _generator(seed)
    b, _, h, w = x.shape
    lo, hi = spec.crop_scale
    if hi > 1 or lo <= 0:
        raise ValueError("crop larger than the image")
    dtype = x.dtype

    scale = lo + (hi - lo) * torch.rand(b, generator=g, dtype=torch.float64)
    # crop centre offsets as a fraction of the free margin
    off_y = torch.rand(b, generator=g, dtype=torch.float64)
    off_x = torch.rand(b, generator=g, dtype=torch.float64)
    flip = torch.rand(b, generator=g, dtype=torch.float64) < spec.flip_p
    bright = (torch.rand(b, generator=g, dtype=torch.float64) * 2 - 1) * spec.brightness
    contrast = 1 + (torch.rand(b, generator=g, dtype=torch.float64) * 2 - 1) * spec.contrast

    out = x.clone()
    crop = scale < 1
    if crop.any():
        s = scale[crop]
        # normalized coordinates (align_corners=False): the crop spans s of the
        # image and its centre may move by (1 - s) either way
        ty = (1 - s) * (2 * off_y[crop] - 1)
        tx = (1 - s) * (2 * off_x[crop] - 1)
        theta = torch.zeros(int(crop.sum()), 2, 3, dtype=torch.float64)
        theta[:, 0, 0] = s
        theta[:, 0, 2] = tx
        theta[:, 1, 1] = s
        theta[:, 1, 2] = ty
        sub = x[crop]
        grid = F.affine_grid(theta.to(dtype), list(sub.shape), align_corners=False)
        out[crop] = F.grid_sample(sub, grid, mode="bilinear", padding_mode="border", align_corners=False)
    if flip.any():
        out[flip] = out[flip].flip(-1)
    if spec.brightness > 0 or spec.contrast > 0:
        mean = out.mean(dim=(1, 2, 3), keepdim=True)
        c = contrast.to(dtype).view(b, 1, 1, 1)
        br = bright.to(dtype).view(b, 1, 1, 1)
        out = ((out - mean) * c + mean + br).clamp(0, 1)
    return out


def weak_geometric(batch, spec: TransformSpec, seed=0) -> torch.Tensor:
    """Crop a (H - m) x (W - m) window at a random offset and resize it back."""
    _require(spec, "weak_geometric")
    x = _images(batch)
    b, _, h, w = x.shape
    m = spec.margin
    if m == 0:
        return x.clone()
    if m >= min(h, w):
        raise ValueError(f"margin {m} leaves nothing of a {h}x{w} image")
    g = _generator(seed)
    tops = torch.randint(0, m + 1, (b,), generator=g)
    lefts = torch.randint(0, m + 1, (b,), generator=g)
    crops = torch.stack([x[i, :, t : t + h - m, l : l + w - m] for i, (t, l) in enumerate(zip(tops.tolist(), lefts.tolist()))])
    return F.interpolate(crops, size=(h, w), mode="bilinear", align_corners=False)


@dataclass
class MixupPair:
    mixed_input: torch.Tensor
    partner_indices: torch.Tensor
    alphas: torch.Tensor


def mixup(batch, spec: TransformSpec, seed=0, alpha: float | None = None) -> MixupPair:
    """Blend every sample with a randomly chosen partner of the same batch.

    ``alpha`` forces a fixed mixing coefficient instead of Beta draws.
    """
    _require(spec, "mixup")
    x = _images(batch)
    b = x.shape[0]
    if b < 2:
        raise ValueError("mixup needs at least 2 samples")
    g = _generator(seed)
    partners = torch.randperm(b, generator=g)
    if alpha is None:
        # Beta(a, a) by inverse CDF so the seeded generator is the only RNG
        u = torch.rand(b, generator=g, dtype=torch.float64)
        alphas = torch.from_numpy(betaincinv(spec.beta, spec.beta, u.numpy()))
    else:
        if not 0 <= alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        alphas = torch.full((b,), float(alpha), dtype=torch.float64)
    a = alphas.to(x.dtype).view(b, 1, 1, 1)
    mixed = a * x + (1 - a) * x[partners]
    return MixupPair(mixed, partners, alphas)


def mixup_output(posteriors, pair: MixupPair) -> torch.Tensor:
    """Mix posteriors with the same partners and coefficients as the inputs."""
    p = core.as_tensor(posteriors)
    if p.ndim != 2 or p.shape[0] != pair.partner_indices.shape[0]:
        raise ValueError(f"posteriors of shape {tuple(p.shape)} do not match a batch of {pair.partner_indices.shape[0]}")
    a = pair.alphas.to(p.dtype).view(-1, 1)
    return a * p + (1 - a) * p[pair.partner_indices]


def _normalize(d: torch.Tensor, fallback: torch.Tensor | None = None) -> torch.Tensor:
    norm = d.flatten(1).norm(dim=1).view(-1, *([1] * (d.ndim - 1)))
    unit = d / norm.clamp_min(1e-30)
    if fallback is not None:
        unit = torch.where(norm > 0, unit, fallback)
    return unit


def _divergence(kind: str, p, p_hat, symmetrize: bool) -> torch.Tensor:
    if isinstance(p, (list, tuple)):
        # multi-head model: average over heads
        return sum(_divergence(kind, a, b, symmetrize) for a, b in zip(p, p_hat)) / len(p)
    if kind == "kl":
        return core.kl_div(p, p_hat, validate=False)
    if kind == "neg_mi":
        return -core.mi_yy(core.joint(p, p_hat, symmetrize=symmetrize, validate=False))
    raise ValueError(f"unknown divergence {kind!r}")


def adversarial_direction(model, x: torch.Tensor, spec: TransformSpec, divergence: str, seed=0, symmetrize: bool = True) -> torch.Tensor:
    """Unit-norm (per sample) direction maximizing the output divergence.

    Power iteration: start from a random unit vector and repeatedly replace
    it by the normalized gradient of the divergence at ``x + xi * d``.
    Only the direction receives gradients; model parameters are constants.
    """
    g = _generator(seed)
    x = x.detach()
    dim = math.prod(x.shape[1:])
    xi = spec.xi if spec.xi is not None else 1e-6 * math.sqrt(dim)
    with torch.no_grad():
        p = model(x)
    d = _normalize(torch.randn(x.shape, generator=g, dtype=torch.float64).to(x.dtype))
    for _ in range(spec.power_iterations):
        d = d.detach().requires_grad_(True)
        div = _divergence(divergence, p, model(x + xi * d), symmetrize)
        (g_d,) = torch.autograd.grad(div, d)
        if not torch.isfinite(g_d).all():
            raise FloatingPointError("non-finite gradient in power iteration")
        d = _normalize(g_d.detach(), fallback=d.detach())
    return d.detach()


def vat_perturbation(model, batch, spec: TransformSpec, divergence: str | None = None, seed=0, clamp: bool = True, symmetrize: bool = True) -> torch.Tensor:
    """``x + r`` with ``||r||_2 == epsilon`` per sample (before clamping to [0, 1]).

    ``divergence`` defaults to ``"kl"`` for VAT and ``"neg_mi"`` for IVAT, the
    latter being the perturbation that most reduces MI(Y, Y~) on the batch.
    ``model`` is any callable mapping inputs to a batch of posteriors, or to
    a list of them (one per head), in which case divergences are averaged.
    """
    _require(spec, "vat", "ivat")
    if divergence is None:
        divergence = "kl" if spec.kind == "vat" else "neg_mi"
    if not math.isfinite(spec.epsilon) or spec.epsilon < 0:
        raise ValueError("epsilon must be finite and >= 0")
    x = core.as_tensor(batch).detach()
    if x.ndim < 2:
        raise ValueError("expected a batch")
    if spec.epsilon == 0:
        return x.clone()
    d = adversarial_direction(model, x, spec, divergence, seed, symmetrize)
    out = x + spec.epsilon * d
    return out.clamp(0, 1) if clamp else out


def apply(spec: TransformSpec, batch, seed=0, model=None, symmetrize: bool = True):
    """Dispatch on ``spec.kind``. Mixup returns a MixupPair, everything else a batch."""
    if spec.kind == "identity":
        return _images(batch).clone()
    if spec.kind == "geometric":
        return geometric(batch, spec, seed)
    if spec.kind == "weak_geometric":
        return weak_geometric(batch, spec, seed)
    if spec.kind == "mixup":
        return mixup(batch, spec, seed)
    if model is None:
        raise ValueError(f"{spec.kind} needs the model")
    return vat_perturbation(model, batch, spec, seed=seed, symmetrize=symmetrize)
