"""A minimal dense+ReLU network used to measure what precision loss does to
inference: output divergence, top-1 accuracy and Taylor-residual scaling.

Weights are read from a TensorModel by name (``layer{i}.weight`` with shape
``(out, in)`` and ``layer{i}.bias`` with shape ``(out,)``). Inference upcasts
the float32 weights and accumulates in float64.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from os import PathLike
from typing import Sequence

import numpy as np

from .errors import ModelMismatchError
from .model_store import TensorModel
from .update import apply_update, compute_update

__all__ = [
    "MlpSpec",
    "LabeledDataset",
    "forward",
    "jvp",
    "output_divergence",
    "top1_accuracy",
    "random_mlp",
    "train_mlp",
    "activation_margin",
    "taylor_residual_check",
    "TaylorResult",
    "load_dataset",
    "save_dataset",
]


@dataclass(frozen=True)
class MlpSpec:
    dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) < 2 or any(d <= 0 for d in dims):
            raise ValueError("an MLP needs at least an input and an output dimension, all positive")
        object.__setattr__(self, "dims", dims)

    @property
    def layers(self) -> list[tuple[int, int]]:
        return list(zip(self.dims[:-1], self.dims[1:]))

    @property
    def n_inputs(self) -> int:
        return self.dims[0]

    @property
    def n_classes(self) -> int:
        return self.dims[-1]

    def tensor_names(self) -> list[str]:
        return [n for i in range(len(self.layers)) for n in (f"layer{i}.weight", f"layer{i}.bias")]

    def check(self, model: TensorModel) -> None:
        arrays = model.arrays()
        for i, (d_in, d_out) in enumerate(self.layers):
            for name, shape in ((f"layer{i}.weight", (d_out, d_in)), (f"layer{i}.bias", (d_out,))):
                if name not in arrays:
                    raise ModelMismatchError(f"model lacks tensor {name!r}")
                if arrays[name].shape != shape:
                    raise ModelMismatchError(f"{name}: expected shape {shape}, got {arrays[name].shape}")

    @classmethod
    def infer(cls, model: TensorModel) -> "MlpSpec":
        """Recover the layer dims from ``layer{i}.weight`` shapes."""
        arrays = model.arrays()
        dims: list[int] = []
        i = 0
        while f"layer{i}.weight" in arrays:
            w = arrays[f"layer{i}.weight"]
            if w.ndim != 2:
                raise ModelMismatchError(f"layer{i}.weight is not a matrix")
            if not dims:
                dims.append(w.shape[1])
            dims.append(w.shape[0])
            i += 1
        if not dims:
            raise ModelMismatchError("model has no layer0.weight tensor")
        spec = cls(tuple(dims))
        spec.check(model)
        if len(arrays) != len(spec.tensor_names()):
            raise ModelMismatchError("model has tensors that are not part of an MLP")
        return spec

    @classmethod
    def from_text(cls, text: str) -> "MlpSpec":
        """Parse ``dims = 4, 16, 3`` (key=value lines, ``#`` comments)."""
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            if key.strip() == "dims":
                return cls(tuple(int(v) for v in value.replace(",", " ").split()))
            if key.strip() != "activation" or value.strip().lower() != "relu":
                raise ValueError(f"unrecognised MLP config line: {line!r}")
        raise ValueError("MLP config has no 'dims' entry")

    def to_text(self) -> str:
        return "activation = relu\ndims = " + ", ".join(str(d) for d in self.dims) + "\n"


def _layer_arrays(spec: MlpSpec, weights) -> list[tuple[np.ndarray, np.ndarray]]:
    if isinstance(weights, TensorModel):
        spec.check(weights)
        arrays = weights.arrays()
        return [
            (arrays[f"layer{i}.weight"].astype(np.float64), arrays[f"layer{i}.bias"].astype(np.float64))
            for i in range(len(spec.layers))
        ]
    # raw (weight, bias) pairs, e.g. float64 copies for finite differences
    return [(np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64)) for w, b in weights]


def _as_batch(spec: MlpSpec, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != spec.n_inputs:
        raise ModelMismatchError(f"input has {x.shape[1]} features, network expects {spec.n_inputs}")
    return x, single


def forward(spec: MlpSpec, weights, x) -> np.ndarray:
    """Logits for one input vector or a batch of row vectors."""
    layers = _layer_arrays(spec, weights)
    a, single = _as_batch(spec, x)
    for i, (w, b) in enumerate(layers):
        a = a @ w.T + b
        if i < len(layers) - 1:
            a = np.maximum(a, 0.0)
    return a[0] if single else a


def jvp(spec: MlpSpec, weights, direction, x) -> np.ndarray:
    """Directional derivative of the logits along a weight-space direction."""
    layers = _layer_arrays(spec, weights)
    tangents = _layer_arrays(spec, direction)
    a, single = _as_batch(spec, x)
    da = np.zeros_like(a)
    for i, ((w, b), (dw, db)) in enumerate(zip(layers, tangents)):
        z = a @ w.T + b
        dz = a @ dw.T + da @ w.T + db
        if i < len(layers) - 1:
            mask = z > 0
            a, da = np.where(mask, z, 0.0), np.where(mask, dz, 0.0)
        else:
            a, da = z, dz
    return da[0] if single else da


def activation_margin(spec: MlpSpec, weights, x) -> np.ndarray:
    """Smallest |pre-activation| over hidden units, per input row."""
    layers = _layer_arrays(spec, weights)
    a, _ = _as_batch(spec, x)
    margin = np.full(a.shape[0], np.inf)
    for w, b in layers[:-1]:
        z = a @ w.T + b
        margin = np.minimum(margin, np.abs(z).min(axis=1))
        a = np.maximum(z, 0.0)
    return margin


def output_divergence(spec: MlpSpec, wa, wb, xs) -> tuple[float, float]:
    """(max, mean) over the batch of the per-input max-abs logit difference."""
    d = np.abs(forward(spec, wa, xs) - forward(spec, wb, xs))
    per_input = np.atleast_2d(d).max(axis=1)
    return float(per_input.max()), float(per_input.mean())


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        y = np.asarray(self.labels, dtype=np.int64).ravel()
        if X.shape[0] != y.shape[0]:
            raise ValueError("features and labels disagree on row count")
        if y.size and y.min() < 0:
            raise ValueError("labels must be non-negative class indices")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]

    def check(self, spec: MlpSpec) -> None:
        if self.features.shape[1] != spec.n_inputs:
            raise ModelMismatchError("dataset feature dimension does not match the network input")
        if len(self) and self.labels.max() >= spec.n_classes:
            raise ModelMismatchError("dataset has labels beyond the network's class count")


def load_dataset(path: str | PathLike) -> LabeledDataset:
    """CSV with the label in the last column; a non-numeric first row is a header."""
    rows = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                if i == 0:
                    continue
                raise
    if not rows:
        raise ValueError(f"{path}: no data rows")
    arr = np.array(rows, dtype=np.float64)
    labels = arr[:, -1]
    if not np.all(labels == np.round(labels)):
        raise ValueError(f"{path}: labels must be integers")
    return LabeledDataset(arr[:, :-1], labels.astype(np.int64))


def save_dataset(data: LabeledDataset, path: str | PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(data.features.shape[1])] + ["label"])
        for x, y in zip(data.features, data.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


def top1_accuracy(spec: MlpSpec, weights, data: LabeledDataset) -> float:
    # np.argmax breaks ties toward the lowest class index
    if len(data) == 0:
        return 0.0
    data.check(spec)
    pred = np.argmax(np.atleast_2d(forward(spec, weights, data.features)), axis=1)
    return float(np.mean(pred == data.labels))


def random_mlp(spec: MlpSpec, seed: int | np.random.Generator = 0, name: str = "mlp") -> TensorModel:
    """He-initialised weights and small random biases."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for i, (d_in, d_out) in enumerate(spec.layers):
        arrays[f"layer{i}.weight"] = rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_out, d_in))
        arrays[f"layer{i}.bias"] = rng.normal(0.0, 0.1, size=d_out)
    return TensorModel.from_arrays(name, arrays)


def train_mlp(
    spec: MlpSpec,
    data: LabeledDataset,
    *,
    epochs: int = 200,
    learning_rate: float = 0.01,
    batch_size: int = 64,
    seed: int = 0,
    name: str = "mlp",
) -> TensorModel:
    """Softmax cross-entropy fit with Adam; only used to produce desk-scale models."""
    rng = np.random.default_rng(seed)
    init = random_mlp(spec, rng, name)
    params = [init[n].astype(np.float64) for n in spec.tensor_names()]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    X, y = data.features, data.labels
    n = len(data)
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            grads = _ce_gradients(params, X[idx], y[idx])
            step += 1
            for j, g in enumerate(grads):
                m[j] = beta1 * m[j] + (1 - beta1) * g
                v[j] = beta2 * v[j] + (1 - beta2) * g * g
                mhat = m[j] / (1 - beta1**step)
                vhat = v[j] / (1 - beta2**step)
                params[j] -= learning_rate * mhat / (np.sqrt(vhat) + eps)
    return TensorModel.from_arrays(name, list(zip(spec.tensor_names(), params)))


def _ce_gradients(params: list[np.ndarray], X: np.ndarray, y: np.ndarray) -> list[np.ndarray]:
    layers = list(zip(params[0::2], params[1::2]))
    acts = [X]
    pre = []
    a = X
    for i, (w, b) in enumerate(layers):
        z = a @ w.T + b
        pre.append(z)
        a = np.maximum(z, 0.0) if i < len(layers) - 1 else z
        acts.append(a)
    logits = acts[-1]
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(len(y)), y] -= 1.0
    dz = p / len(y)
    grads: list[np.ndarray] = []
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads = [dz.T @ acts[i], dz.sum(axis=0)] + grads
        if i:
            dz = (dz @ w) * (pre[i - 1] > 0)
    return grads


# --- Taylor-residual scaling ------------------------------------------------


@dataclass(frozen=True)
class TaylorResult:
    deltas: tuple[float, ...]
    residuals: tuple[float, ...]  # |R' - R_h|, each remainder about its own displacement
    divergences: tuple[float, ...]  # |f(W') - f(W^h)|
    slope: float | None  # None when every residual is within float noise
    divergence_slope: float | None
    smooth: bool  # no hidden unit changed sign anywhere along the family

    @property
    def within_noise(self) -> bool:
        return self.slope is None


def _fit_slope(deltas, values, floor):
    values = np.asarray(values)
    if np.all(values <= floor):
        return None
    keep = values > floor
    if keep.sum() < 2:
        return None
    return float(np.polyfit(np.log(np.asarray(deltas)[keep]), np.log(values[keep]), 1)[0])


def taylor_residual_check(
    spec: MlpSpec,
    high: TensorModel,
    x,
    deltas: Sequence[float],
    *,
    update_bitwidth: int = 8,
    seed: int = 0,
) -> TaylorResult:
    """Measure how the proxy's second-order residual scales with the weight gap.

    For each ``delta`` a low-precision stand-in ``W^l = W^h - delta * D``
    (``D`` a fixed random direction, entries in [-1, 1]) is patched with an
    update quantized at ``update_bitwidth``. Expanding ``f(W^h)`` and
    ``f(W')`` to first order about ``W^l`` leaves remainders ``R_h`` and
    ``R'``; ``|R' - R_h|`` should shrink like ``delta**2``. The raw proxy
    divergence ``|f(W') - f(W^h)|`` is reported alongside; it carries the
    first-order effect of the update's own grid error and shrinks like
    ``delta``.
    """
    spec.check(high)
    rng = np.random.default_rng(seed)
    direction = [rng.uniform(-1.0, 1.0, size=t.shape) for t in high.tensors]
    x = np.asarray(x, dtype=np.float64)
    f_high = forward(spec, high, x)
    scale = max(float(np.abs(f_high).max()), 1.0)
    floor = 64 * np.finfo(np.float64).eps * scale

    residuals, divergences = [], []
    smooth = True
    for delta in deltas:
        low = high.with_arrays(
            [t.values.astype(np.float64) - delta * d for t, d in zip(high.tensors, direction)]
        )
        proxy = apply_update(low, compute_update(high, low, update_bitwidth))
        f_low = forward(spec, low, x)
        f_proxy = forward(spec, proxy, x)
        gap_high = _difference(spec, high, low)
        gap_proxy = _difference(spec, proxy, low)
        r_high = forward(spec, high, x) - f_low - jvp(spec, low, gap_high, x)
        r_proxy = f_proxy - f_low - jvp(spec, low, gap_proxy, x)
        residuals.append(float(np.abs(r_proxy - r_high).max()))
        divergences.append(float(np.abs(f_proxy - f_high).max()))
        for w in (low, proxy):
            smooth &= bool(np.all(_same_pattern(spec, high, w, x)))
    return TaylorResult(
        tuple(float(d) for d in deltas),
        tuple(residuals),
        tuple(divergences),
        _fit_slope(deltas, residuals, floor),
        _fit_slope(deltas, divergences, floor),
        smooth,
    )


def _difference(spec: MlpSpec, a: TensorModel, b: TensorModel) -> list[tuple[np.ndarray, np.ndarray]]:
    la, lb = _layer_arrays(spec, a), _layer_arrays(spec, b)
    return [(wa - wb, ba - bb) for (wa, ba), (wb, bb) in zip(la, lb)]


def _same_pattern(spec: MlpSpec, wa, wb, x) -> np.ndarray:
    la, lb = _layer_arrays(spec, wa), _layer_arrays(spec, wb)
    a, _ = _as_batch(spec, x)
    b = a
    same = np.ones(a.shape[0], dtype=bool)
    for (w1, b1), (w2, b2) in zip(la[:-1], lb[:-1]):
        za, zb = a @ w1.T + b1, b @ w2.T + b2
        same &= np.all((za > 0) == (zb > 0), axis=1)
        a, b = np.maximum(za, 0.0), np.maximum(zb, 0.0)
    return same
