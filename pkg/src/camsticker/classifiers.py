"""Classifier backends.

Every backend takes caller-space batches of shape (N, H, W, 3) in [0, 1] and
applies its own preprocessing. ``input_gradient`` returns the gradient of the
targeted loss ce(y_star) - ce(y_targ) with respect to those caller-space pixels.
"""

from __future__ import annotations

import io
import json
import threading
import zipfile
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class GradientUnavailable(RuntimeError):
    """Raised when a backend cannot differentiate its input; use finite-difference mode."""


class ModelInputError(ValueError):
    pass


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(z):
    m = z.max(axis=1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))


def cross_entropy(logits, labels):
    """Per-example softmax cross-entropy."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.broadcast_to(np.asarray(labels), (len(logits),))
    return -log_softmax(logits)[np.arange(len(logits)), labels]


def targeted_loss_terms(logits, y_star, y_targ):
    """Per-example ce(f, y_star) - ce(f, y_targ)."""
    return cross_entropy(logits, y_star) - cross_entropy(logits, y_targ)


def targeted_logit_grad(logits, y_star, y_targ):
    p = softmax(np.asarray(logits, dtype=np.float64))
    g = p.copy()
    g[:, y_star] -= 1.0
    g2 = p.copy()
    g2[:, y_targ] -= 1.0
    return g - g2


class ClassifierBackend:
    num_classes: int = 0
    labels: list[str] | None = None
    input_shape: tuple[int, int] | None = None
    supports_input_gradient = False
    max_batch = 32
    concurrency_safe = True

    def _check(self, images):
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[3] != 3:
            raise ModelInputError(f"expected a batch of RGB images (N, H, W, 3), got shape {x.shape}")
        if self.input_shape is not None and tuple(x.shape[1:3]) != tuple(self.input_shape):
            h, w = self.input_shape
            raise ModelInputError(f"model expects {h}x{w} RGB input, got {x.shape[1]}x{x.shape[2]}")
        return x

    def forward(self, images) -> np.ndarray:
        x = self._check(images)
        out = [self._forward(x[s : s + self.max_batch]) for s in range(0, len(x), self.max_batch)]
        if not out:
            return np.zeros((0, self.num_classes))
        return np.concatenate(out, axis=0)

    def predict(self, images) -> np.ndarray:
        return np.argmax(self.forward(images), axis=1)

    def input_gradient(self, images, y_star, y_targ):
        """Gradient of ce(y_star) - ce(y_targ) per image, shape (N, H, W, 3).

        Also returns the per-image loss terms as a second value.
        """
        if not self.supports_input_gradient:
            raise GradientUnavailable(
                f"{type(self).__name__} does not provide input gradients; enable finite-difference mode"
            )
        x = self._check(images)
        grads, losses = [], []
        for s in range(0, len(x), self.max_batch):
            g, l = self._input_gradient(x[s : s + self.max_batch], y_star, y_targ)
            grads.append(g)
            losses.append(l)
        return np.concatenate(grads), np.concatenate(losses)

    def _forward(self, x):
        raise NotImplementedError

    def _input_gradient(self, x, y_star, y_targ):
        raise NotImplementedError


class ConstantClassifier(ClassifierBackend):
    """Ignores its input. Handy for tie-break and zero-gradient checks."""

    supports_input_gradient = True

    def __init__(self, logits):
        self.logits = np.asarray(logits, dtype=np.float64)
        self.num_classes = len(self.logits)

    def _forward(self, x):
        return np.tile(self.logits, (len(x), 1))

    def _input_gradient(self, x, y_star, y_targ):
        return np.zeros_like(x), targeted_loss_terms(self._forward(x), y_star, y_targ)


class LinearClassifier(ClassifierBackend):
    """logits = W @ flatten(x) + b on raw [0, 1] pixels."""

    supports_input_gradient = True

    def __init__(self, weights, bias, input_shape):
        self.W = np.asarray(weights, dtype=np.float64)
        self.b = np.asarray(bias, dtype=np.float64)
        self.input_shape = tuple(input_shape)
        self.num_classes = self.W.shape[0]
        h, w = self.input_shape
        if self.W.shape[1] != h * w * 3:
            raise ValueError(f"weight matrix needs {h * w * 3} columns for {h}x{w}x3 input")

    def _forward(self, x):
        return x.reshape(len(x), -1) @ self.W.T + self.b

    def _input_gradient(self, x, y_star, y_targ):
        z = self._forward(x)
        gz = targeted_logit_grad(z, y_star, y_targ)
        return (gz @ self.W).reshape(x.shape), targeted_loss_terms(z, y_star, y_targ)

    def save(self, path):
        meta = {"arch": "linear", "input_shape": list(self.input_shape), "num_classes": self.num_classes}
        _save_npz(path, meta, {"W": self.W, "b": self.b})


def _save_npz(path, meta, arrays):
    """``np.savez`` layout with fixed zip timestamps so equal weights give equal bytes."""
    entries = {"__meta__": np.array(json.dumps(meta, sort_keys=True)), **arrays}
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(entries):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(entries[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


class SerializedBackend(ClassifierBackend):
    """Wraps a backend so concurrent callers take turns."""

    def __init__(self, inner: ClassifierBackend):
        self.inner = inner
        self.num_classes = inner.num_classes
        self.labels = inner.labels
        self.input_shape = inner.input_shape
        self.supports_input_gradient = inner.supports_input_gradient
        self.max_batch = inner.max_batch
        self._lock = threading.Lock()

    def forward(self, images):
        with self._lock:
            return self.inner.forward(images)

    def input_gradient(self, images, y_star, y_targ):
        with self._lock:
            return self.inner.input_gradient(images, y_star, y_targ)


# --------------------------------------------------------------------------
# small convolutional network with a hand-written reverse pass


def _conv_forward(x, W, b):
    k = W.shape[0]
    patches = sliding_window_view(x, (k, k), axis=(1, 2))  # N, Ho, Wo, C, k, k
    n, ho, wo, c = patches.shape[:4]
    cols = np.ascontiguousarray(patches.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, k * k * c)
    out = cols @ W.reshape(k * k * c, -1) + b
    return out.reshape(n, ho, wo, -1), cols


def _conv_backward(dout, cols, x_shape, W, need_dx=True):
    k = W.shape[0]
    n, ho, wo, f = dout.shape
    d2 = dout.reshape(-1, f)
    dW = (cols.T @ d2).reshape(W.shape)
    db = d2.sum(axis=0)
    dx = None
    if need_dx:
        dcols = (d2 @ W.reshape(-1, f).T).reshape(n, ho, wo, k, k, x_shape[3])
        dx = np.zeros(x_shape)
        for di in range(k):
            for dj in range(k):
                dx[:, di : di + ho, dj : dj + wo, :] += dcols[:, :, :, di, dj, :]
    return dx, dW, db


def _avgpool(x, p):
    n, h, w, c = x.shape
    ho, wo = h // p, w // p
    out = np.zeros((n, ho, wo, c), dtype=x.dtype)
    for di in range(p):
        for dj in range(p):
            out += x[:, di : di + ho * p : p, dj : dj + wo * p : p, :]
    out /= p * p
    return out


def _avgpool_backward(dy, p, x_shape):
    dx = np.zeros(x_shape)
    ho, wo = dy.shape[1:3]
    share = dy / (p * p)
    for di in range(p):
        for dj in range(p):
            dx[:, di : di + ho * p : p, dj : dj + wo * p : p, :] = share
    return dx


ARCHITECTURES = ("linear", "conv2")


class ToyConvNet(ClassifierBackend):
    """input pool -> normalize -> conv5 -> relu -> pool2 -> conv3 -> relu -> global mean -> dense."""

    supports_input_gradient = True

    def __init__(
        self,
        params,
        input_shape=(64, 64),
        num_classes=3,
        input_pool=2,
        mean=0.5,
        std=0.25,
        labels=None,
        forward_dtype="float32",
    ):
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        # plain forward passes (the attack's inner loop) may run in single precision;
        # gradients and training always use float64
        self.forward_dtype = np.dtype(forward_dtype)
        self._cast = {}
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.input_pool = int(input_pool)
        self.mean = float(mean)
        self.std = float(std)
        self.labels = labels

    @classmethod
    def init(cls, seed, input_shape=(64, 64), num_classes=3, channels=(16, 32), input_pool=2, labels=None):
        rng = np.random.default_rng(seed)
        c1, c2 = channels
        params = {
            "w1": rng.normal(0, np.sqrt(2 / (25 * 3)), (5, 5, 3, c1)),
            "b1": np.zeros(c1),
            "w2": rng.normal(0, np.sqrt(2 / (9 * c1)), (3, 3, c1, c2)),
            "b2": np.zeros(c2),
            "w3": rng.normal(0, np.sqrt(1 / c2), (c2, num_classes)),
            "b3": np.zeros(num_classes),
        }
        return cls(params, input_shape, num_classes, input_pool, labels=labels)

    def _params_as(self, dtype):
        if dtype == np.float64:
            return self.params
        key = (dtype, tuple(id(v) for v in self.params.values()))
        if key not in self._cast:
            self._cast = {key: {k: v.astype(dtype) for k, v in self.params.items()}}
        return self._cast[key]

    def _run(self, x, dtype=np.float64):
        p = self._params_as(dtype)
        x = np.asarray(x)
        a0 = ((_avgpool(x, self.input_pool) - self.mean) / self.std).astype(dtype, copy=False)
        z1, cols1 = _conv_forward(a0, p["w1"], p["b1"])
        h1 = np.maximum(z1, 0)
        q1 = _avgpool(h1, 2)
        z2, cols2 = _conv_forward(q1, p["w2"], p["b2"])
        h2 = np.maximum(z2, 0)
        feat = h2.mean(axis=(1, 2))
        logits = feat @ p["w3"] + p["b3"]
        cache = (x.shape, a0.shape, z1, cols1, q1.shape, h1.shape, z2, cols2, feat)
        return logits, cache

    def _backward(self, cache, dlogits, need_dx=True):
        p = self.params
        x_shape, a0_shape, z1, cols1, q1_shape, h1_shape, z2, cols2, feat = cache
        grads = {"w3": feat.T @ dlogits, "b3": dlogits.sum(axis=0)}
        dfeat = dlogits @ p["w3"].T
        n, ho, wo, _ = z2.shape
        dz2 = (dfeat[:, None, None, :] / (ho * wo)) * (z2 > 0)
        dq1, grads["w2"], grads["b2"] = _conv_backward(dz2, cols2, q1_shape, p["w2"])
        dz1 = _avgpool_backward(dq1, 2, h1_shape) * (z1 > 0)
        da0, grads["w1"], grads["b1"] = _conv_backward(dz1, cols1, a0_shape, p["w1"], need_dx)
        dx = None
        if need_dx:
            dx = _avgpool_backward(da0 / self.std, self.input_pool, x_shape)
        return grads, dx

    def _forward(self, x):
        return self._run(x, self.forward_dtype)[0].astype(np.float64)

    def _input_gradient(self, x, y_star, y_targ):
        logits, cache = self._run(x)
        _, dx = self._backward(cache, targeted_logit_grad(logits, y_star, y_targ))
        return dx, targeted_loss_terms(logits, y_star, y_targ)

    def loss_and_param_grads(self, x, labels):
        """Mean cross-entropy over a batch and its parameter gradients (for training)."""
        logits, cache = self._run(np.asarray(x, dtype=np.float64))
        n = len(x)
        p = softmax(logits)
        loss = float(np.mean(cross_entropy(logits, labels)))
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        grads, _ = self._backward(cache, d / n, need_dx=False)
        return loss, grads

    # persistence ---------------------------------------------------------

    def save(self, path):
        meta = {
            "arch": "conv2",
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "input_pool": self.input_pool,
            "mean": self.mean,
            "std": self.std,
            "labels": self.labels,
            "forward_dtype": self.forward_dtype.name,
        }
        _save_npz(path, meta, self.params)


def train_classifier(net: ToyConvNet, images, labels, epochs=20, batch_size=32, lr=3e-3, seed=0, log=None):
    """Adam on mean cross-entropy. Deterministic for a fixed seed."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    m = {k: np.zeros_like(v) for k, v in net.params.items()}
    v = {k: np.zeros_like(v) for k, v in net.params.items()}
    b1, b2, eps, step = 0.9, 0.999, 1e-8, 0
    for epoch in range(epochs):
        order = rng.permutation(len(images))
        total = 0.0
        for s in range(0, len(order), batch_size):
            idx = order[s : s + batch_size]
            loss, grads = net.loss_and_param_grads(images[idx], labels[idx])
            total += loss * len(idx)
            step += 1
            for k, g in grads.items():
                m[k] = b1 * m[k] + (1 - b1) * g
                v[k] = b2 * v[k] + (1 - b2) * g * g
                mh = m[k] / (1 - b1**step)
                vh = v[k] / (1 - b2**step)
                net.params[k] = net.params[k] - lr * mh / (np.sqrt(vh) + eps)
        if log is not None:
            log(f"epoch {epoch + 1}: loss {total / len(images):.4f}")
    return net


def builtin_toy_network(seed=0, arch="conv2", input_shape=(64, 64), num_classes=3, **kwargs):
    """Deterministically initialised built-in network ("linear" or "conv2")."""
    if arch == "linear":
        rng = np.random.default_rng(seed)
        h, w = input_shape
        W = rng.normal(0, 1 / np.sqrt(h * w * 3), (num_classes, h * w * 3))
        return LinearClassifier(W, np.zeros(num_classes), input_shape)
    if arch == "conv2":
        return ToyConvNet.init(seed, input_shape, num_classes, **kwargs)
    raise ValueError(f"unknown architecture {arch!r}; choose from {', '.join(ARCHITECTURES)}")


# --------------------------------------------------------------------------
# interchange-format (ONNX) models


def resize_bilinear(x, out_h, out_w):
    """Half-pixel-centre bilinear resize of an (N, H, W, C) batch."""
    n, h, w, c = x.shape
    if (h, w) == (out_h, out_w):
        return x

    def axis_weights(src, dst):
        pos = (np.arange(dst) + 0.5) * src / dst - 0.5
        pos = np.clip(pos, 0, src - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, src - 1)
        return lo, hi, pos - lo

    lo_i, hi_i, fi = axis_weights(h, out_h)
    lo_j, hi_j, fj = axis_weights(w, out_w)
    top = x[:, lo_i] * (1 - fi)[None, :, None, None] + x[:, hi_i] * fi[None, :, None, None]
    return top[:, :, lo_j] * (1 - fj)[None, None, :, None] + top[:, :, hi_j] * fj[None, None, :, None]


DEFAULT_SIDECAR = {
    "resize": [256, 256],
    "crop": [224, 224],
    "mean": [0.485, 0.456, 0.406],
    "std": [0.229, 0.224, 0.225],
    "layout": "NCHW",
    "input_name": None,
    "labels": None,
    "max_batch": 32,
}


class OnnxClassifier(ClassifierBackend):
    """Model in ONNX format run through onnxruntime; preprocessing from a sidecar.

    No input gradients: attacks fall back to finite differences.
    """

    supports_input_gradient = False
    concurrency_safe = True

    def __init__(self, model_path, sidecar=None):
        try:
            import onnxruntime as ort
        except ImportError as exc:  # pragma: no cover - optional dependency
            raise ImportError("ONNX models need the 'onnxruntime' package") from exc
        self.model_path = str(model_path)
        if not Path(self.model_path).is_file():
            raise FileNotFoundError(f"model file not found: {self.model_path}")
        cfg = dict(DEFAULT_SIDECAR)
        cfg.update(sidecar or {})
        self.config = cfg
        opts = ort.SessionOptions()
        opts.intra_op_num_threads = 1
        self.session = ort.InferenceSession(self.model_path, opts, providers=["CPUExecutionProvider"])
        inp = self.session.get_inputs()[0]
        self.input_name = cfg["input_name"] or inp.name
        self.labels = cfg["labels"]
        self.max_batch = int(cfg["max_batch"])
        out_shape = self.session.get_outputs()[0].shape
        self.num_classes = int(out_shape[-1]) if isinstance(out_shape[-1], int) else len(self.labels or [])
        self._expected = inp.shape

    def preprocess(self, x):
        cfg = self.config
        if cfg["resize"]:
            x = resize_bilinear(x, *cfg["resize"])
        if cfg["crop"]:
            ch, cw = cfg["crop"]
            h, w = x.shape[1:3]
            if ch > h or cw > w:
                raise ModelInputError(f"crop {ch}x{cw} larger than resized input {h}x{w}")
            i0, j0 = (h - ch) // 2, (w - cw) // 2
            x = x[:, i0 : i0 + ch, j0 : j0 + cw]
        x = (x - np.asarray(cfg["mean"])) / np.asarray(cfg["std"])
        if cfg["layout"] == "NCHW":
            x = x.transpose(0, 3, 1, 2)
        return np.ascontiguousarray(x, dtype=np.float32)

    def _forward(self, x):
        feed = self.preprocess(x)
        try:
            (out,) = self.session.run(None, {self.input_name: feed})[:1]
        except Exception as exc:
            raise ModelInputError(
                f"model rejected input of shape {feed.shape}; it declares input {self._expected}: {exc}"
            ) from exc
        return np.asarray(out, dtype=np.float64).reshape(len(x), -1)


# --------------------------------------------------------------------------
# loading by spec string


def load_toy_network(path) -> ClassifierBackend:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        params = {k: data[k] for k in data.files if k != "__meta__"}
    if meta["arch"] == "linear":
        return LinearClassifier(params["W"], params["b"], meta["input_shape"])
    return ToyConvNet(
        params,
        tuple(meta["input_shape"]),
        meta["num_classes"],
        meta["input_pool"],
        meta["mean"],
        meta["std"],
        meta.get("labels"),
        meta.get("forward_dtype", "float32"),
    )


def load_backend(spec: str) -> ClassifierBackend:
    """``builtin:<weights.npz>`` or ``onnx:<model.onnx>[::<sidecar>]``.

    Without an explicit sidecar, ``<model>.yaml`` / ``<model>.json`` next to the
    model is used when present.
    """
    kind, _, rest = spec.partition(":")
    if kind == "builtin":
        return load_toy_network(rest)
    if kind == "onnx":
        from .artifacts import read_structured

        model, sep, side = rest.partition("::") if "::" in rest else (rest, "", "")
        sidecar = None
        if not side:
            for cand in (model + ".yaml", model + ".json", str(Path(model).with_suffix(".yaml"))):
                if Path(cand).is_file():
                    side = cand
                    break
        if side:
            sidecar = read_structured(side)
        return OnnxClassifier(model, sidecar)
    raise ValueError(f"unknown model spec {spec!r}; use builtin:<path> or onnx:<path>")
