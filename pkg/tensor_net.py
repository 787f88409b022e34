"""
Réseaux feedforward minimaux (dense / convolution) avec softmax à température.

Les tenseurs sont des numpy.ndarray float64. Les entrées d'un empilement
convolutif sont au format (C, H, W), celles d'un empilement dense sont des
vecteurs. Toutes les fonctions publiques acceptent une entrée seule ou un lot
(N, *input_shape).
"""

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import log_softmax, softmax

from errors import (
    DataError,
    DivergenceError,
    EmptyDatasetError,
    FormatError,
    LayerIndexError,
    ParameterError,
    ShapeError,
)

NET_FORMAT = "certvote-net"
NET_VERSION = 1

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    decay: float = 1e-6
    momentum: float = 0.9
    dropout_keep: float = 0.5
    batch_size: int = 128
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ParameterError(f"learning_rate doit être > 0 (reçu {self.learning_rate})")
        if self.decay < 0:
            raise ParameterError(f"decay doit être >= 0 (reçu {self.decay})")
        if not 0 <= self.momentum < 1:
            raise ParameterError(f"momentum hors de [0,1) : {self.momentum}")
        if not 0 < self.dropout_keep <= 1:
            raise ParameterError(f"dropout_keep hors de (0,1] : {self.dropout_keep}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ParameterError("batch_size >= 1 et epochs >= 0 requis")


class Layer:
    kind = ""

    def __init__(self, params=None):
        self.params = dict(params or {})
        self.weights = None
        self.bias = None

    def output_shape(self, input_shape):
        return tuple(input_shape)

    def param_shapes(self):
        return None

    def fans(self):
        return None

    def forward(self, x, training=False, rng=None):
        raise NotImplementedError

    def backward(self, grad, cache):
        """Retourne (grad_x, grad_w, grad_b)."""
        raise NotImplementedError


class Dense(Layer):
    kind = "dense"

    def output_shape(self, input_shape):
        if tuple(input_shape) != (self.params["in_dim"],):
            raise ShapeError(f"dense attend ({self.params['in_dim']},), reçu {tuple(input_shape)}")
        return (self.params["out_dim"],)

    def param_shapes(self):
        return (self.params["out_dim"], self.params["in_dim"]), (self.params["out_dim"],)

    def fans(self):
        return self.params["in_dim"], self.params["out_dim"]

    def forward(self, x, training=False, rng=None):
        return x @ self.weights.T + self.bias, x

    def backward(self, grad, cache):
        return grad @ self.weights, grad.T @ cache, grad.sum(axis=0)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=False, rng=None):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, grad, cache):
        return grad * cache, None, None


class Conv2D(Layer):
    """Convolution 'valid', pas de 1, poids (out, in, kh, kw)."""

    kind = "conv2d"

    def output_shape(self, input_shape):
        p = self.params
        if len(input_shape) != 3 or input_shape[0] != p["in_channels"]:
            raise ShapeError(f"conv2d attend ({p['in_channels']}, H, W), reçu {tuple(input_shape)}")
        _, h, w = input_shape
        if h < p["kernel_h"] or w < p["kernel_w"]:
            raise ShapeError(f"entrée {tuple(input_shape)} plus petite que le noyau")
        return (p["out_channels"], h - p["kernel_h"] + 1, w - p["kernel_w"] + 1)

    def param_shapes(self):
        p = self.params
        return (p["out_channels"], p["in_channels"], p["kernel_h"], p["kernel_w"]), (p["out_channels"],)

    def fans(self):
        p = self.params
        area = p["kernel_h"] * p["kernel_w"]
        return p["in_channels"] * area, p["out_channels"] * area

    def forward(self, x, training=False, rng=None):
        kh, kw = self.params["kernel_h"], self.params["kernel_w"]
        oh, ow = x.shape[2] - kh + 1, x.shape[3] - kw + 1
        out = np.zeros((x.shape[0], self.weights.shape[0], oh, ow))
        for i in range(kh):
            for j in range(kw):
                out += np.einsum("nchw,oc->nohw", x[:, :, i:i + oh, j:j + ow], self.weights[:, :, i, j])
        return out + self.bias[None, :, None, None], x

    def backward(self, grad, cache):
        x = cache
        kh, kw = self.params["kernel_h"], self.params["kernel_w"]
        oh, ow = grad.shape[2], grad.shape[3]
        grad_x = np.zeros_like(x)
        grad_w = np.zeros_like(self.weights)
        for i in range(kh):
            for j in range(kw):
                window = x[:, :, i:i + oh, j:j + ow]
                grad_w[:, :, i, j] = np.einsum("nohw,nchw->oc", grad, window)
                grad_x[:, :, i:i + oh, j:j + ow] += np.einsum("nohw,oc->nchw", grad, self.weights[:, :, i, j])
        return grad_x, grad_w, grad.sum(axis=(0, 2, 3))


class MaxPool2D(Layer):
    kind = "maxpool2d"

    def output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[1] < 2 or input_shape[2] < 2:
            raise ShapeError(f"maxpool2d attend (C, H>=2, W>=2), reçu {tuple(input_shape)}")
        c, h, w = input_shape
        return (c, h // 2, w // 2)

    def forward(self, x, training=False, rng=None):
        n, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        windows = (
            x[:, :, :h2 * 2, :w2 * 2]
            .reshape(n, c, h2, 2, w2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h2, w2, 4)
        )
        winner = windows.argmax(axis=-1)
        out = np.take_along_axis(windows, winner[..., None], axis=-1)[..., 0]
        return out, (x.shape, winner)

    def backward(self, grad, cache):
        shape, winner = cache
        n, c, h, w = shape
        h2, w2 = h // 2, w // 2
        routed = np.zeros((n, c, h2, w2, 4))
        np.put_along_axis(routed, winner[..., None], grad[..., None], axis=-1)
        grad_x = np.zeros(shape)
        grad_x[:, :, :h2 * 2, :w2 * 2] = (
            routed.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2 * 2, w2 * 2)
        )
        return grad_x, None, None


class Dropout(Layer):
    """Dropout inversé : actif seulement à l'entraînement."""

    kind = "dropout"

    def forward(self, x, training=False, rng=None):
        keep = self.params.get("keep", 1.0)
        if not training or keep >= 1.0:
            return x, None
        mask = (rng.random(x.shape) < keep) / keep
        return x * mask, mask

    def backward(self, grad, cache):
        return (grad if cache is None else grad * cache), None, None


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x, training=False, rng=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, grad, cache):
        return grad.reshape(cache), None, None


LAYER_KINDS = {cls.kind: cls for cls in (Dense, ReLU, Conv2D, MaxPool2D, Dropout, Flatten)}


def make_layer(spec):
    if spec.kind not in LAYER_KINDS:
        raise ParameterError(f"type de couche inconnu : {spec.kind}")
    return LAYER_KINDS[spec.kind](spec.params)


class Network:
    def __init__(self, layers, input_shape, temperature, label_count=10):
        if not temperature > 0:
            raise ParameterError(f"la température doit être > 0 (reçu {temperature})")
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.temperature = float(temperature)
        self.label_count = int(label_count)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        if shape != (self.label_count,):
            raise ShapeError(f"sortie pré-softmax {shape}, attendu ({self.label_count},)")

    @property
    def logit_index(self):
        return len(self.layers) - 1

    @property
    def layer_count(self):
        # la dernière position est la sortie softmax
        return len(self.layers) + 1

    @property
    def specs(self):
        return [LayerSpec(layer.kind, dict(layer.params)) for layer in self.layers]


def build_network(specs, input_shape, temperature, label_count=10, seed=0):
    net = Network([make_layer(spec) for spec in specs], input_shape, temperature, label_count)
    rng = np.random.default_rng(seed)
    for layer in net.layers:
        shapes = layer.param_shapes()
        if shapes is None:
            continue
        fan_in, fan_out = layer.fans()
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        layer.weights = rng.uniform(-limit, limit, size=shapes[0])
        layer.bias = np.zeros(shapes[1])
    return net


def dense_specs(input_dim, hidden=(32, 32), label_count=10, keep=1.0):
    specs = []
    width = input_dim
    for size in hidden:
        specs += [LayerSpec("dense", {"in_dim": width, "out_dim": size}), LayerSpec("relu")]
        if keep < 1.0:
            specs.append(LayerSpec("dropout", {"keep": keep}))
        width = size
    specs.append(LayerSpec("dense", {"in_dim": width, "out_dim": label_count}))
    return specs


def conv_specs(channels=8, hidden=32, label_count=10, keep=1.0, in_channels=1, input_hw=(28, 28)):
    """Quatre convolutions 3x3 + ReLU, deux max-pooling, deux couches denses."""
    def conv(cin):
        return LayerSpec("conv2d", {"kernel_h": 3, "kernel_w": 3, "in_channels": cin, "out_channels": channels})

    h, w = input_hw
    for _ in range(2):
        h, w = (h - 4) // 2, (w - 4) // 2
    specs = [
        conv(in_channels), LayerSpec("relu"), conv(channels), LayerSpec("relu"), LayerSpec("maxpool2d"),
        conv(channels), LayerSpec("relu"), conv(channels), LayerSpec("relu"), LayerSpec("maxpool2d"),
        LayerSpec("flatten"),
    ]
    return specs + dense_specs(channels * h * w, (hidden, hidden), label_count, keep)


def _as_batch(net, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape == net.input_shape:
        return x[None], True
    if x.shape[1:] == net.input_shape:
        return x, False
    raise ShapeError(f"entrée {x.shape} incompatible avec {net.input_shape}")


def _forward(net, x, training=False, rng=None, stop=None):
    caches = []
    layers = net.layers if stop is None else net.layers[:stop + 1]
    for layer in layers:
        x, cache = layer.forward(x, training, rng)
        caches.append(cache)
    return x, caches


def _backward(net, caches, grad):
    param_grads = [None] * len(net.layers)
    for index in range(len(net.layers) - 1, -1, -1):
        grad, grad_w, grad_b = net.layers[index].backward(grad, caches[index])
        if grad_w is not None:
            param_grads[index] = (grad_w, grad_b)
    return grad, param_grads


def softmax_t(z, temperature):
    if not temperature > 0:
        raise ParameterError(f"la température doit être > 0 (reçu {temperature})")
    return softmax(np.asarray(z, dtype=np.float64) / temperature, axis=-1)


def logits(net, x):
    batch, single = _as_batch(net, x)
    z, _ = _forward(net, batch)
    return z[0] if single else z


def layer_output(net, x, layer_index):
    if not 0 <= layer_index < net.layer_count:
        raise LayerIndexError(f"couche {layer_index} hors de [0, {net.layer_count})")
    batch, single = _as_batch(net, x)
    if layer_index == len(net.layers):
        out = softmax_t(_forward(net, batch)[0], net.temperature)
    else:
        out, _ = _forward(net, batch, stop=layer_index)
    return out[0] if single else out


def predict(net, x):
    return np.argmax(logits(net, x), axis=-1)


def accuracy(net, dataset, chunk=1024):
    if len(dataset) == 0:
        raise EmptyDatasetError(f"{dataset.name}: jeu vide")
    hits = 0
    for start in range(0, len(dataset), chunk):
        hits += int(np.sum(predict(net, dataset.inputs[start:start + chunk]) == dataset.labels[start:start + chunk]))
    return hits / len(dataset)


def logit_objective(j):
    def objective(z):
        grad = np.zeros_like(z)
        grad[j] = 1.0
        return z[j], grad
    return objective


def softmax_objective(j, temperature):
    def objective(z):
        p = softmax_t(z, temperature)
        basis = np.zeros_like(z)
        basis[j] = 1.0
        return p[j], p[j] * (basis - p) / temperature
    return objective


def value_and_input_gradient(net, x, objective):
    """Retourne (z, objective(z), d objective / dx) pour une entrée seule."""
    batch, single = _as_batch(net, x)
    if not single:
        raise ShapeError("input_gradient attend une entrée seule, pas un lot")
    z, caches = _forward(net, batch)
    value, grad_z = objective(z[0])
    grad_x, _ = _backward(net, caches, np.asarray(grad_z, dtype=np.float64)[None])
    return z[0], float(value), grad_x[0]


def input_gradient(net, x, objective):
    return value_and_input_gradient(net, x, objective)[2]


def cross_entropy(z, labels, temperature):
    log_p = log_softmax(z / temperature, axis=1)
    return float(-np.mean(log_p[np.arange(len(labels)), labels]))


def train(net, data, cfg):
    if len(data) == 0:
        raise EmptyDatasetError(f"{data.name}: jeu d'entraînement vide")
    if data.input_shape != net.input_shape:
        raise ShapeError(f"données {data.input_shape} pour un réseau {net.input_shape}")
    if data.labels.min() < 0 or data.labels.max() >= net.label_count:
        raise DataError(f"{data.name}: étiquettes hors de [0, {net.label_count})")

    trained = copy.deepcopy(net)
    for layer in trained.layers:
        if isinstance(layer, Dropout):
            layer.params["keep"] = cfg.dropout_keep
    if cfg.epochs == 0:
        return trained

    rng = np.random.default_rng(cfg.seed)
    temperature = trained.temperature
    velocity = [
        None if layer.weights is None else (np.zeros_like(layer.weights), np.zeros_like(layer.bias))
        for layer in trained.layers
    ]
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        epoch_loss = 0.0
        for start in range(0, len(data), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            labels = data.labels[idx]
            z, caches = _forward(trained, data.inputs[idx], training=True, rng=rng)
            epoch_loss += cross_entropy(z, labels, temperature) * len(idx)
            grad_z = softmax(z / temperature, axis=1)
            grad_z[np.arange(len(idx)), labels] -= 1.0
            grad_z /= temperature * len(idx)
            _, param_grads = _backward(trained, caches, grad_z)
            rate = cfg.learning_rate / (1.0 + cfg.decay * step)
            for layer, grads, v in zip(trained.layers, param_grads, velocity):
                if grads is None:
                    continue
                v[0][...] = cfg.momentum * v[0] - rate * grads[0]
                v[1][...] = cfg.momentum * v[1] - rate * grads[1]
                layer.weights += v[0]
                layer.bias += v[1]
            step += 1
        if not np.isfinite(epoch_loss):
            raise DivergenceError(f"perte non finie à l'époque {epoch} (T={temperature})")
        logger.debug("T=%g époque %d perte %.5f", temperature, epoch, epoch_loss / len(data))
    return trained


def network_to_dict(net):
    return {
        "format": NET_FORMAT,
        "version": NET_VERSION,
        "temperature": net.temperature,
        "label_count": net.label_count,
        "input_shape": list(net.input_shape),
        "layers": [
            {
                "kind": layer.kind,
                "params": dict(layer.params),
                "weights": [] if layer.weights is None else layer.weights.ravel().tolist(),
                "bias": [] if layer.bias is None else layer.bias.ravel().tolist(),
            }
            for layer in net.layers
        ],
    }


def network_from_dict(doc):
    if doc.get("format") != NET_FORMAT or doc.get("version") != NET_VERSION:
        raise FormatError(f"document réseau inattendu : {doc.get('format')} v{doc.get('version')}")
    layers = [make_layer(LayerSpec(entry["kind"], entry.get("params", {}))) for entry in doc["layers"]]
    net = Network(layers, doc["input_shape"], doc["temperature"], doc.get("label_count", 10))
    for layer, entry in zip(net.layers, doc["layers"]):
        shapes = layer.param_shapes()
        if shapes is None:
            continue
        try:
            layer.weights = np.asarray(entry["weights"], dtype=np.float64).reshape(shapes[0])
            layer.bias = np.asarray(entry["bias"], dtype=np.float64).reshape(shapes[1])
        except ValueError as e:
            raise FormatError(f"couche {layer.kind} : {e}")
    return net


def save_network(net, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(network_to_dict(net), f)


def load_network(path):
    with open(path, encoding="utf-8") as f:
        return network_from_dict(json.load(f))
