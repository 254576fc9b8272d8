"""Gradient training of the learned fusion parameters.

The forward model of :mod:`semfuse.glfs` is re-expressed on torch tensors
(float64) so the loss gradients w.r.t. the unconstrained parameters come from
reverse-mode differentiation; optimization is plain minibatch gradient
descent with a fixed learning rate (no adaptive optimizers, for
determinism). Parameters are unconstrained via ``tau = exp(u)``,
``G = sigmoid(g)``, ``eps = sigmoid(e)``, ``table = softplus(m)``.

A central-finite-difference check (:func:`gradient_check`) validates the
gradients against the same loss evaluated at perturbed parameters.
"""

from __future__ import annotations

import numpy as np

from .cache import ObservationCache
from .errors import DegenerateInputError, SemfuseError
from .glfs import GLFSParams, TrainerConfig, table_bins

_GATE_CLIP = 1e-7


def _logit(p: float) -> float:
    p = min(max(p, _GATE_CLIP), 1.0 - _GATE_CLIP)
    return float(np.log(p / (1.0 - p)))


def _softplus_inv(y: np.ndarray) -> np.ndarray:
    return np.log(np.expm1(y))


def unconstrained_from_params(params: GLFSParams) -> dict[str, np.ndarray]:
    return {
        "u": np.log(params.tau),
        "g": np.array([_logit(params.gate_g)]),
        "e": np.array([_logit(params.gate_eps)]),
        "m": _softplus_inv(params.table.reshape(-1)),
    }


def params_from_unconstrained(theta: dict, template: GLFSParams) -> GLFSParams:
    sigmoid = lambda x: 1.0 / (1.0 + np.exp(-x))
    return GLFSParams(
        tau=np.exp(theta["u"]),
        gate_g=float(sigmoid(theta["g"][0])),
        gate_eps=float(sigmoid(theta["e"][0])),
        table=np.logaddexp(0.0, theta["m"]).reshape(template.table.shape),
        dist_edges=template.dist_edges,
        inc_edges=template.inc_edges,
    )


class _CacheTensors:
    """Cache content as torch tensors plus precomputed table bin offsets."""

    def __init__(self, cache: ObservationCache, params: GLFSParams, torch):
        self.torch = torch
        self.class_count = cache.class_count
        self.dist_bins = params.table.shape[1]
        self.inc_bins = params.table.shape[2]
        db, ab = table_bins(params, cache.obs_dist, cache.obs_inc)
        self.logits = torch.from_numpy(cache.obs_logits.astype(np.float64))
        self.bin_offset = torch.from_numpy((db * self.inc_bins + ab).astype(np.int64))
        self.seg = torch.from_numpy(cache.obs_voxel_row)
        self.gt = torch.from_numpy(cache.voxel_gt.astype(np.int64))
        self.num_voxels = cache.num_voxels
        self.start = cache.voxel_start
        self.counts = cache.obs_counts

    def batch(self, rows: np.ndarray):
        lengths = self.counts[rows]
        total = int(lengths.sum())
        base = np.repeat(self.start[rows], lengths)
        offs = np.arange(total, dtype=np.int64) - np.repeat(
            np.concatenate([[0], np.cumsum(lengths)[:-1]]), lengths
        )
        obs_rows = self.torch.from_numpy(base + offs)
        seg = self.torch.from_numpy(np.repeat(np.arange(rows.size, dtype=np.int64), lengths))
        return {
            "logits": self.logits[obs_rows],
            "bin_offset": self.bin_offset[obs_rows],
            "seg": seg,
            "gt": self.gt[self.torch.from_numpy(rows)],
            "num_voxels": rows.size,
        }

    def full(self):
        return {
            "logits": self.logits,
            "bin_offset": self.bin_offset,
            "seg": self.seg,
            "gt": self.gt,
            "num_voxels": self.num_voxels,
        }


def _forward_loss(torch, theta, batch, config: TrainerConfig, dist_bins: int, inc_bins: int):
    u, g, e, m = theta["u"], theta["g"], theta["e"], theta["m"]
    k = u.shape[0]
    tau = torch.exp(u)
    gate_g = torch.sigmoid(g)[0]
    gate_eps = torch.sigmoid(e)[0]
    table = torch.nn.functional.softplus(m)

    scaled = batch["logits"] / tau
    p = torch.softmax(scaled, dim=1)
    pred_obs = scaled.argmax(dim=1)
    w = table[pred_obs * (dist_bins * inc_bins) + batch["bin_offset"]]

    v = batch["num_voxels"]
    seg = batch["seg"]
    wsum = torch.zeros(v, dtype=torch.float64).index_add_(0, seg, w)
    gate = (1.0 - gate_eps) / wsum + gate_eps
    lnp = torch.log((p + config.alpha) / (1.0 + k * config.alpha))
    geo_sum = torch.zeros(v, k, dtype=torch.float64).index_add_(0, seg, w[:, None] * lnp)
    geo = torch.softmax(gate[:, None] * geo_sum, dim=1)
    lin_sum = torch.zeros(v, k, dtype=torch.float64).index_add_(0, seg, w[:, None] * p)
    lin = lin_sum / lin_sum.sum(dim=1, keepdim=True)
    s = gate_g * geo + (1.0 - gate_g) * lin

    gt = batch["gt"]
    p_true = s.gather(1, gt[:, None]).squeeze(1).clamp_min(1e-12)
    nll = -p_true.log().mean()
    if config.eta == 0:
        return nll

    conf, pred_v = s.max(dim=1)
    correct = (pred_v == gt).to(torch.float64)
    edges = torch.linspace(0.0, 1.0, config.bins + 1, dtype=torch.float64)
    z0 = torch.sigmoid((conf[:, None] - edges[:-1][None, :]) / config.sharpness)
    z1 = torch.sigmoid((conf[:, None] - edges[1:][None, :]) / config.sharpness)
    mu = z0 - z1
    mu = mu / (mu.sum(dim=1, keepdim=True) + 1e-12)
    per_class = []
    for kk in torch.unique(gt):
        rows = gt == kk
        mu_k = mu[rows]
        cnt = mu_k.sum(dim=0)
        n_k = cnt.sum()
        conf_b = (mu_k * conf[rows, None]).sum(dim=0) / (cnt + 1e-12)
        acc_b = (mu_k * correct[rows, None]).sum(dim=0) / (cnt + 1e-12)
        per_class.append((cnt / n_k * (acc_b - conf_b).abs()).sum())
    mdece = torch.stack(per_class).mean()
    return config.eta * mdece + nll


def torch_loss(cache: ObservationCache, params: GLFSParams, config: TrainerConfig) -> float:
    """Loss via the torch forward path (cross-check against the numpy loss)."""
    import torch

    theta = {k: torch.from_numpy(v.copy()) for k, v in unconstrained_from_params(params).items()}
    tensors = _CacheTensors(cache, params, torch)
    with torch.no_grad():
        return float(
            _forward_loss(torch, theta, tensors.full(), config, params.table.shape[1], params.table.shape[2])
        )


def train_glfs(
    cache: ObservationCache,
    init: GLFSParams | None = None,
    config: TrainerConfig | None = None,
) -> tuple[GLFSParams, list[float]]:
    """Minibatch gradient descent; returns the best parameters seen and the
    per-epoch loss history (entry 0 is the loss at initialization)."""
    import torch

    config = config or TrainerConfig()
    if np.unique(cache.voxel_gt).size < 2:
        raise DegenerateInputError("GLFS training needs at least 2 ground-truth classes in the cache")
    cache = cache.subsample(config.max_cache_voxels, config.seed)
    init = init or GLFSParams.trainable_init(cache.class_count)

    torch.set_num_threads(1)
    prev_det = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True)
    try:
        theta = {
            k: torch.from_numpy(v.copy()).requires_grad_(True)
            for k, v in unconstrained_from_params(init).items()
        }
        tensors = _CacheTensors(cache, init, torch)
        d_bins, i_bins = init.table.shape[1], init.table.shape[2]
        full = tensors.full()

        def full_loss() -> float:
            with torch.no_grad():
                return float(_forward_loss(torch, theta, full, config, d_bins, i_bins))

        rng = np.random.default_rng(config.seed)
        history = [full_loss()]
        best_loss = history[0]
        best = {k: v.detach().numpy().copy() for k, v in theta.items()}

        for epoch in range(config.epochs):
            order = rng.permutation(cache.num_voxels)
            for b0 in range(0, cache.num_voxels, config.batch_size):
                rows = np.sort(order[b0 : b0 + config.batch_size])
                loss = _forward_loss(torch, theta, tensors.batch(rows), config, d_bins, i_bins)
                if not torch.isfinite(loss):
                    raise SemfuseError(
                        f"training diverged (non-finite loss) at epoch {epoch}, batch {b0 // config.batch_size}"
                    )
                for v in theta.values():
                    if v.grad is not None:
                        v.grad = None
                loss.backward()
                with torch.no_grad():
                    for v in theta.values():
                        v -= config.lr * v.grad
            epoch_loss = full_loss()
            if not np.isfinite(epoch_loss):
                raise SemfuseError(f"training diverged (non-finite loss) after epoch {epoch}")
            history.append(epoch_loss)
            if epoch_loss < best_loss:
                best_loss = epoch_loss
                best = {k: v.detach().numpy().copy() for k, v in theta.items()}
    finally:
        torch.use_deterministic_algorithms(prev_det)

    return params_from_unconstrained(best, init), history


def gradient_check(
    cache: ObservationCache,
    params: GLFSParams | None = None,
    config: TrainerConfig | None = None,
    h: float = 1e-5,
    entries: int = 64,
    seed: int = 0,
) -> float:
    """Max relative error between reverse-mode and central-difference
    gradients of the training loss on a voxel subsample."""
    import torch

    config = config or TrainerConfig()
    params = params or GLFSParams.trainable_init(cache.class_count)
    sub = cache.subsample(entries, seed)
    tensors = _CacheTensors(sub, params, torch)
    full = tensors.full()
    d_bins, i_bins = params.table.shape[1], params.table.shape[2]

    base = unconstrained_from_params(params)
    keys = ["u", "g", "e", "m"]
    sizes = [base[k].size for k in keys]
    flat0 = np.concatenate([base[k] for k in keys])

    def unflatten(flat: np.ndarray) -> dict:
        out, pos = {}, 0
        for k, n in zip(keys, sizes):
            out[k] = flat[pos : pos + n]
            pos += n
        return out

    def loss_at(flat: np.ndarray) -> float:
        theta = {k: torch.from_numpy(v.copy()) for k, v in unflatten(flat).items()}
        with torch.no_grad():
            return float(_forward_loss(torch, theta, full, config, d_bins, i_bins))

    theta = {k: torch.from_numpy(v.copy()).requires_grad_(True) for k, v in unflatten(flat0).items()}
    loss = _forward_loss(torch, theta, full, config, d_bins, i_bins)
    loss.backward()
    analytic = np.concatenate(
        [
            (np.zeros(sizes[i]) if theta[k].grad is None else theta[k].grad.numpy().reshape(-1))
            for i, k in enumerate(keys)
        ]
    )

    fd = np.zeros_like(flat0)
    for i in range(flat0.size):
        up = flat0.copy()
        dn = flat0.copy()
        up[i] += h
        dn[i] -= h
        fd[i] = (loss_at(up) - loss_at(dn)) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-6)
    return float(np.max(np.abs(analytic - fd) / denom))
