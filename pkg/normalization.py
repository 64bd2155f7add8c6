#!/usr/bin/env python3
"""
Normalization Layers
Batch normalization (batch statistics or running statistics), per-image-group
PatchNorm, GroupNorm and InstanceNorm, plus the running-statistics update.
"""

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterable, Optional, Tuple

import numpy as np

from tensor_engine import ContractError, Function, ShapeError, Tensor, add, mul, reshape

MODES = ("train", "eval")
NORM_KINDS = ("batch", "patch", "group", "instance")


@dataclass
class NormConfig:
    """Settings shared by every normalized layer of a model."""
    momentum: float = 0.1
    eps: float = 1e-5
    disc_track_running_stats: bool = False
    stop_stat_grad: bool = False
    group_norm_groups: int = 8


@dataclass
class NormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    gamma: Tensor
    beta: Tensor
    momentum: float = 0.1
    track_running_stats: bool = True
    mode: str = "train"
    eps: float = 1e-5
    stop_stat_grad: bool = False
    batches_tracked: int = 0

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, track_running_stats: bool = True,
               eps: float = 1e-5, stop_stat_grad: bool = False) -> "NormState":
        if not 0.0 <= momentum <= 1.0:
            raise ValueError(f"momentum must be in [0, 1], got {momentum}")
        return cls(
            running_mean=np.zeros(channels, dtype=np.float32),
            running_var=np.ones(channels, dtype=np.float32),
            gamma=Tensor(np.ones(channels), requires_grad=True),
            beta=Tensor(np.zeros(channels), requires_grad=True),
            momentum=momentum,
            track_running_stats=track_running_stats,
            eps=eps,
            stop_stat_grad=stop_stat_grad,
        )

    @property
    def channels(self) -> int:
        return self.running_mean.shape[0]

    @property
    def running_std(self) -> np.ndarray:
        # stored as variance; sigma is its square root
        return np.sqrt(self.running_var)


@dataclass(frozen=True)
class GroupLayout:
    group_size: int
    group_count: int = 1

    def __post_init__(self):
        if self.group_size < 1 or self.group_count < 1:
            raise ShapeError(f"group layout needs positive sizes, got {self.group_size}x{self.group_count}")

    @property
    def batch_size(self) -> int:
        return self.group_size * self.group_count

    def check(self, batch: int) -> None:
        if batch != self.batch_size:
            raise ShapeError(
                f"batch axis 0 has {batch} patches but layout expects "
                f"{self.group_count} groups x {self.group_size}")


class Normalize(Function):
    """Zero-mean, unit-variance over `axes` using the input's own (biased) statistics."""

    def forward(self, x, axes=(), eps=1e-5, stop_stat_grad=False):
        x64 = x.astype(np.float64)
        mu = x64.mean(axis=axes, keepdims=True)
        centered = x64 - mu
        var = (centered * centered).mean(axis=axes, keepdims=True)
        self.inv = 1.0 / np.sqrt(var + eps)
        self.xhat = centered * self.inv
        self.axes, self.stop = axes, stop_stat_grad
        return self.xhat.astype(x.dtype)

    def backward(self, grad):
        g = grad.astype(np.float64)
        if self.stop:
            return ((g * self.inv).astype(grad.dtype),)
        g_mean = g.mean(axis=self.axes, keepdims=True)
        gx_mean = (g * self.xhat).mean(axis=self.axes, keepdims=True)
        dx = self.inv * (g - g_mean - self.xhat * gx_mean)
        return (dx.astype(grad.dtype),)


def _channel_axes(x: Tensor) -> Tuple[int, ...]:
    return (0,) + tuple(range(2, x.ndim))


def _affine(xhat: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    shape = (1, gamma.shape[0]) + (1,) * (xhat.ndim - 2)
    return add(mul(xhat, reshape(gamma, shape)), reshape(beta, shape))


def batch_stats(x) -> Tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and population variance over every axis but 1."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    axes = (0,) + tuple(range(2, data.ndim))
    if data.ndim < 2 or data.size == 0:
        raise ContractError(f"batch_stats needs a non-empty batch, got shape {data.shape}")
    x64 = data.astype(np.float64)
    mu = x64.mean(axis=axes)
    var = ((x64 - mu.reshape((1, -1) + (1,) * (data.ndim - 2))) ** 2).mean(axis=axes)
    return mu, var


def update_running(state: NormState, batch_mean, batch_spread, domain: str = "variance") -> None:
    """Momentum update: running <- (1 - m) running + m batch.

    domain="variance": batch_spread is a variance and the average is taken on variances.
    domain="std": batch_spread is a standard deviation and the average is taken on sigmas.
    """
    if state.mode != "train" or not state.track_running_stats:
        raise ContractError("update_running needs mode=train with track_running_stats=True")
    if domain not in ("variance", "std"):
        raise ValueError(f"Unknown statistics domain: {domain}")
    state.batches_tracked += 1
    m = state.momentum
    if m == 0.0:
        return
    dtype = state.running_mean.dtype
    batch_mean = np.asarray(batch_mean, dtype=np.float64)
    batch_spread = np.asarray(batch_spread, dtype=np.float64)
    if m == 1.0:
        state.running_mean = batch_mean.astype(dtype)
        spread = batch_spread if domain == "variance" else batch_spread ** 2
        state.running_var = spread.astype(dtype)
        return
    state.running_mean = ((1.0 - m) * state.running_mean.astype(np.float64) + m * batch_mean).astype(dtype)
    if domain == "variance":
        new_var = (1.0 - m) * state.running_var.astype(np.float64) + m * batch_spread
    else:
        new_var = ((1.0 - m) * np.sqrt(state.running_var.astype(np.float64)) + m * batch_spread) ** 2
    state.running_var = np.maximum(new_var, 0.0).astype(dtype)


def _check_channels(x: Tensor, state: NormState) -> None:
    if x.ndim < 2 or x.shape[1] != state.channels:
        raise ShapeError(f"channel axis 1 has {x.shape[1] if x.ndim > 1 else None} "
                         f"but the layer has {state.channels}")


def _track_batch(x: Tensor, state: NormState) -> None:
    mu, var = batch_stats(x)
    n = x.data.size // x.shape[1]
    unbiased = var * n / (n - 1) if n > 1 else var
    update_running(state, mu, unbiased)


def batchnorm_forward(x: Tensor, state: NormState) -> Tensor:
    """(x - mean) / sqrt(var + eps) * gamma + beta, from batch or running statistics."""
    _check_channels(x, state)
    if state.mode not in MODES:
        raise ContractError(f"Unknown normalization mode: {state.mode}")
    if state.mode == "train" or not state.track_running_stats:
        xhat = Normalize.apply(x, axes=_channel_axes(x), eps=state.eps, stop_stat_grad=state.stop_stat_grad)
        if state.mode == "train" and state.track_running_stats:
            _track_batch(x, state)
        return _affine(xhat, state.gamma, state.beta)

    shape = (1, state.channels) + (1,) * (x.ndim - 2)
    inv = 1.0 / np.sqrt(state.running_var.astype(np.float64) + state.eps)
    xhat = mul(add(x, Tensor((-state.running_mean).reshape(shape))), Tensor(inv.reshape(shape)))
    return _affine(xhat, state.gamma, state.beta)


def patchnorm_forward(x: Tensor, state: NormState, layout: GroupLayout) -> Tensor:
    """Batch statistics per contiguous group of patches, shared affine parameters."""
    _check_channels(x, state)
    layout.check(x.shape[0])
    grouped = reshape(x, (layout.group_count, layout.group_size) + x.shape[1:])
    axes = (1,) + tuple(range(3, grouped.ndim))
    xhat = Normalize.apply(grouped, axes=axes, eps=state.eps, stop_stat_grad=state.stop_stat_grad)
    if state.mode == "train" and state.track_running_stats:
        _track_batch(x, state)
    return _affine(reshape(xhat, x.shape), state.gamma, state.beta)


def groupnorm_forward(x: Tensor, gamma: Tensor, beta: Tensor, num_groups: int,
                      eps: float = 1e-5, stop_stat_grad: bool = False) -> Tensor:
    """Per-sample statistics over (channel group, H, W)."""
    channels = x.shape[1]
    if num_groups < 1 or channels % num_groups:
        raise ShapeError(f"channel axis 1 ({channels}) is not divisible into {num_groups} groups")
    grouped = reshape(x, (x.shape[0], num_groups, channels // num_groups) + x.shape[2:])
    axes = tuple(range(2, grouped.ndim))
    xhat = Normalize.apply(grouped, axes=axes, eps=eps, stop_stat_grad=stop_stat_grad)
    return _affine(reshape(xhat, x.shape), gamma, beta)


def instancenorm_forward(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5,
                         stop_stat_grad: bool = False) -> Tensor:
    """Per-sample, per-channel statistics over (H, W)."""
    return groupnorm_forward(x, gamma, beta, x.shape[1], eps=eps, stop_stat_grad=stop_stat_grad)


class NormLayer:
    """A normalized layer of one of NORM_KINDS with its state."""

    def __init__(self, kind: str, channels: int, track_running_stats: bool, cfg: NormConfig):
        if kind not in NORM_KINDS:
            raise ValueError(f"Unknown normalization kind: {kind}")
        self.kind = kind
        self.num_groups = cfg.group_norm_groups if kind == "group" else channels
        if kind == "group" and channels % self.num_groups:
            raise ShapeError(f"channel count {channels} is not divisible into {self.num_groups} groups")
        tracked = track_running_stats and kind in ("batch", "patch")
        self.state = NormState.create(channels, momentum=cfg.momentum, track_running_stats=tracked,
                                      eps=cfg.eps, stop_stat_grad=cfg.stop_stat_grad)

    def parameters(self):
        return [self.state.gamma, self.state.beta]

    def __call__(self, x: Tensor, layout: Optional[GroupLayout] = None) -> Tensor:
        s = self.state
        if self.kind == "group" or self.kind == "instance":
            return groupnorm_forward(x, s.gamma, s.beta, self.num_groups, s.eps, s.stop_stat_grad)
        uses_running = s.mode == "eval" and s.track_running_stats
        if self.kind == "patch" and layout is not None and layout.group_count > 1 and not uses_running:
            return patchnorm_forward(x, s, layout)
        return batchnorm_forward(x, s)


@contextmanager
def inference_statistics(layers: Iterable[NormLayer], which: str):
    """Evaluate with 'learned' running statistics or with 'batch' statistics."""
    if which not in ("learned", "batch"):
        raise ValueError(f"Unknown statistics mode: {which}")
    layers = [layer for layer in layers if layer.kind in ("batch", "patch")]
    saved = [(layer.state.mode, layer.state.track_running_stats) for layer in layers]
    if which == "learned":
        untracked = [layer for layer in layers
                     if not layer.state.track_running_stats or layer.state.batches_tracked == 0]
        if untracked:
            raise ContractError("learned statistics need layers trained with track_running_stats=True")
    try:
        for layer in layers:
            layer.state.mode = "eval"
            layer.state.track_running_stats = which == "learned"
        yield
    finally:
        for layer, (mode, track) in zip(layers, saved):
            layer.state.mode = mode
            layer.state.track_running_stats = track
