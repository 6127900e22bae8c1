"""Small differentiable video classifiers and their trainer.

Three architectures play the roles of the attacked models:

``frame_cnn_meanpool``
    per-frame conv + relu + 2x2 pool, features averaged over time, linear.
``frame_cnn_recurrent``
    the same per-frame features fed through a GRU cell, linear on the last state.
``conv3d``
    one 3x3x3 convolution + relu + global average pool, linear.

Inputs are videos shaped ``(T, H, W, C)`` or batches ``(B, T, H, W, C)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .data import VideoRecord, read_tensor, write_tensor
from .optim import AdamState, adam_step

ARCHS = ("frame_cnn_recurrent", "conv3d", "frame_cnn_meanpool")
CONV_CHANNELS = 8
HIDDEN = 32
DEFAULT_LAMBDA = {"frame_cnn_recurrent": 1.5, "conv3d": 1.0, "frame_cnn_meanpool": 1.0}


@dataclass
class ClassifierSpec:
    arch: str
    num_classes: int
    input_shape: tuple[int, int, int, int]
    params: dict[str, Tensor] = field(default_factory=dict)

    def copy(self) -> "ClassifierSpec":
        return replace(self, params={k: Tensor(v.data.copy()) for k, v in self.params.items()})


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def init_classifier(arch: str, input_shape: Sequence[int], num_classes: int,
                    seed: int = 0) -> ClassifierSpec:
    """Random weights with a zero output layer (so untrained outputs are uniform)."""
    if arch not in ARCHS:
        raise ValueError(f"unknown arch {arch!r}; expected one of {ARCHS}")
    T, H, W, C = (int(s) for s in input_shape)
    rng = np.random.default_rng(seed)
    K, F = num_classes, CONV_CHANNELS
    p: dict[str, np.ndarray] = {}
    if arch == "conv3d":
        p["conv_w"] = _he(rng, (3, 3, 3, C, F), 27 * C)
        p["conv_b"] = np.zeros(F)
        p["fc_w"] = np.zeros((F, K))
    else:
        if H % 2 or W % 2:
            raise ShapeError(f"{arch}: frame extents {(H, W)} must be even")
        p["conv_w"] = _he(rng, (3, 3, C, F), 9 * C)
        p["conv_b"] = np.zeros(F)
        feat = F * (H // 2) * (W // 2)
        if arch == "frame_cnn_recurrent":
            p["gru_wx"] = rng.standard_normal((feat, 3 * HIDDEN)) / np.sqrt(feat)
            p["gru_bx"] = np.zeros(3 * HIDDEN)
            p["gru_uzr"] = rng.standard_normal((HIDDEN, 2 * HIDDEN)) / np.sqrt(HIDDEN)
            p["gru_un"] = rng.standard_normal((HIDDEN, HIDDEN)) / np.sqrt(HIDDEN)
            p["fc_w"] = np.zeros((HIDDEN, K))
        else:
            p["fc_w"] = np.zeros((feat, K))
    p["fc_b"] = np.zeros(K)
    return ClassifierSpec(arch, K, (T, H, W, C), {k: Tensor(v) for k, v in p.items()})


def _frame_features(prm, x: Tensor, B: int, T: int) -> Tensor:
    _, _, H, W, C = x.shape
    frames = ad.reshape(x, (B * T, H, W, C))
    h = ad.avg_pool(ad.relu(ad.conv2d(frames, prm["conv_w"], prm["conv_b"])), 2)
    return ad.reshape(h, (B, T, -1))


def _gru(prm, feats: Tensor, B: int, T: int) -> Tensor:
    Hd = HIDDEN
    xp = ad.reshape(ad.linear(ad.reshape(feats, (B * T, -1)), prm["gru_wx"], prm["gru_bx"]),
                    (B, T, 3 * Hd))
    h = Tensor(np.zeros((B, Hd)))
    for t in range(T):
        xt = xp[:, t, :]
        zr = ad.sigmoid(xt[:, : 2 * Hd] + h @ prm["gru_uzr"])
        z, r = zr[:, :Hd], zr[:, Hd:]
        n = ad.tanh(xt[:, 2 * Hd:] + (r * h) @ prm["gru_un"])
        h = (1.0 - z) * n + z * h
    return h


def logits(spec: ClassifierSpec, X) -> Tensor:
    x = ad.as_tensor(X)
    single = x.data.ndim == 4
    if single:
        x = ad.reshape(x, (1,) + x.shape)
    if x.data.ndim != 5 or tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise ShapeError(f"{spec.arch}: input shape {x.shape} does not match {spec.input_shape}")
    B, T = x.shape[0], x.shape[1]
    prm = spec.params
    if spec.arch == "conv3d":
        h = ad.relu(ad.conv3d(x, prm["conv_w"], prm["conv_b"]))
        z = ad.reduce_mean(h, axis=(1, 2, 3))
    elif spec.arch == "frame_cnn_meanpool":
        z = ad.reduce_mean(_frame_features(prm, x, B, T), axis=1)
    else:
        z = _gru(prm, _frame_features(prm, x, B, T), B, T)
    out = ad.linear(z, prm["fc_w"], prm["fc_b"])
    return ad.reshape(out, (spec.num_classes,)) if single else out


def forward(spec: ClassifierSpec, X) -> Tensor:
    """Class probabilities: ``(K,)`` for one video, ``(B, K)`` for a batch."""
    return ad.softmax(logits(spec, X))


def predict(spec: ClassifierSpec, X) -> int | np.ndarray:
    probs = forward(spec, X).data
    return int(np.argmax(probs)) if probs.ndim == 1 else np.argmax(probs, axis=-1)


def cross_entropy(probs, y) -> Tensor:
    """``-log probs[y]``; for a batch, the mean over rows."""
    probs = ad.as_tensor(probs)
    K = probs.shape[-1]
    if probs.data.ndim == 1:
        y = int(y)
        if not 0 <= y < K:
            raise ValueError(f"cross_entropy: class {y} out of range [0, {K})")
        return -ad.log(probs[y])
    y = np.asarray(y, dtype=int)
    if np.any((y < 0) | (y >= K)):
        raise ValueError(f"cross_entropy: labels out of range [0, {K})")
    onehot = np.zeros(probs.shape)
    onehot[np.arange(len(y)), y] = 1.0
    picked = ad.reduce_sum(probs * onehot, axis=1)
    return -ad.reduce_mean(ad.log(picked))


def accuracy(spec: ClassifierSpec, records: Sequence[VideoRecord], batch_size: int = 32) -> float:
    correct = 0
    for i in range(0, len(records), batch_size):
        chunk = records[i:i + batch_size]
        pred = predict(spec, np.stack([r.video for r in chunk]))
        correct += int(np.sum(pred == np.array([r.label for r in chunk])))
    return correct / len(records)


def train(spec: ClassifierSpec, records: Sequence[VideoRecord], epochs: int = 30,
          lr: float = 1e-3, batch_size: int = 8, seed: int = 0,
          log=None) -> tuple[ClassifierSpec, list[dict]]:
    """Minibatch Adam on mean cross-entropy; returns a new spec and per-epoch history."""
    if not records:
        raise ValueError("train: empty dataset")
    if any(not 0 <= r.label < spec.num_classes for r in records):
        raise ValueError(f"train: labels must lie in [0, {spec.num_classes})")
    out = spec.copy()
    names = sorted(out.params)
    arrays = [out.params[n].data for n in names]
    state = AdamState.like(arrays)
    rng = np.random.default_rng(seed)
    videos = np.stack([r.video for r in records])
    labels = np.array([r.label for r in records])
    history = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(records))
        total = 0.0
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            leaves = [Tensor(a, requires_grad=True) for a in arrays]
            out.params = dict(zip(names, leaves))
            loss = cross_entropy(forward(out, videos[idx]), labels[idx])
            grads = ad.grad(loss, leaves)
            arrays, state = adam_step(arrays, grads, state, lr)
            total += loss.item() * len(idx)
        out.params = {n: Tensor(a) for n, a in zip(names, arrays)}
        row = {"epoch": epoch, "loss": total / len(records), "accuracy": accuracy(out, records)}
        history.append(row)
        if log is not None:
            log(row)
    out.params = {n: Tensor(a) for n, a in zip(names, arrays)}
    return out, history


def save_classifier(spec: ClassifierSpec, path) -> Path:
    """A model is a directory: ``meta.json`` plus one SAVT file per parameter."""
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    meta = {"arch": spec.arch, "num_classes": spec.num_classes,
            "input_shape": list(spec.input_shape), "params": sorted(spec.params)}
    (d / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    for name, t in spec.params.items():
        write_tensor(d / f"{name}.savt", t.data)
    return d


def load_classifier(path) -> ClassifierSpec:
    d = Path(path)
    meta_path = d / "meta.json"
    if not meta_path.is_file():
        raise FileNotFoundError(f"missing model metadata: {meta_path}")
    meta = json.loads(meta_path.read_text())
    params = {n: Tensor(read_tensor(d / f"{n}.savt")) for n in meta["params"]}
    return ClassifierSpec(meta["arch"], int(meta["num_classes"]), tuple(meta["input_shape"]), params)
