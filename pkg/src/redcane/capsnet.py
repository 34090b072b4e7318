"""A small capsule network with dynamic routing, trained from scratch in numpy.

Every operation-group output of the forward pass is a named ``Site`` and goes
through the injector before it feeds the next operation. Training uses the
same forward code with a null injector and a hand-written backward pass that
unrolls all routing iterations.
"""
from __future__ import annotations

import enum
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .noise import Injector
from .sites import GroupId, Site
from .tensor import (
    Range,
    conv2d,
    conv2d_backward,
    conv_output_size,
    softmax_axis,
    softmax_backward,
    squash,
    squash_backward,
)

log = logging.getLogger(__name__)

M_PLUS, M_MINUS, LAMBDA_ABSENT = 0.9, 0.1, 0.5


class LayerKind(str, enum.Enum):
    CONV2D = "Conv2D"
    PRIMARY_CAPS = "PrimaryCaps"
    CONV_CAPS = "ConvCaps2D"
    CLASS_CAPS = "ClassCaps"


@dataclass
class LayerSpec:
    """One layer.

    ``channels`` is the filter count of a Conv2D layer, the number of capsule
    types of a (Primary|Conv)Caps layer and the number of output capsules of
    a ClassCaps layer. ``routing_iters`` only applies to ClassCaps.
    """

    kind: LayerKind
    name: str
    channels: int
    kernel_size: int = 3
    stride: int = 1
    padding: str = "valid"
    capsule_dim: int = 1
    routing_iters: int = 3
    activation: str = "relu"

    def __post_init__(self):
        self.kind = LayerKind(self.kind)
        if self.channels < 1 or self.capsule_dim < 1:
            raise ValueError(f"{self.name}: channel count and capsule dimension must be >= 1")
        if self.kind is LayerKind.CLASS_CAPS and self.routing_iters < 1:
            raise ValueError(f"{self.name}: routing needs at least one iteration")


@dataclass
class NetworkSpec:
    layers: list[LayerSpec]
    input_shape: tuple[int, int, int] = (8, 8, 1)
    num_classes: int = 10

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers]
        self.shapes()

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-sample output shape of every layer; raises on an invalid graph."""
        if not self.layers:
            raise ValueError("network has no layers")
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names in {names}")
        shape = self.input_shape
        out = []
        for layer in self.layers:
            shape = _layer_output_shape(layer, shape)
            out.append(shape)
        last = self.layers[-1]
        if last.kind is not LayerKind.CLASS_CAPS:
            raise ValueError("the last layer must be a ClassCaps layer")
        if last.channels != self.num_classes:
            raise ValueError(f"ClassCaps has {last.channels} capsules for {self.num_classes} classes")
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        for l in d["layers"]:
            l["kind"] = LayerKind(l["kind"]).value
        d["input_shape"] = list(self.input_shape)
        return d


def _layer_output_shape(layer: LayerSpec, shape):
    kind = layer.kind
    if kind is LayerKind.CLASS_CAPS:
        if len(shape) not in (2, 4):
            raise ValueError(f"{layer.name}: ClassCaps needs capsule input, got shape {shape}")
        return (layer.channels, layer.capsule_dim)
    if kind is LayerKind.CONV2D and len(shape) != 3:
        raise ValueError(f"{layer.name}: Conv2D needs [H,W,C] input, got {shape}")
    if kind is LayerKind.PRIMARY_CAPS and len(shape) != 3:
        raise ValueError(f"{layer.name}: PrimaryCaps needs [H,W,C] input, got {shape}")
    if kind is LayerKind.CONV_CAPS and len(shape) != 4:
        raise ValueError(f"{layer.name}: ConvCaps2D needs capsule-grid input, got {shape}")
    h = conv_output_size(shape[0], layer.kernel_size, layer.stride, layer.padding)
    w = conv_output_size(shape[1], layer.kernel_size, layer.stride, layer.padding)
    if kind is LayerKind.CONV2D:
        return (h, w, layer.channels)
    return (h, w, layer.channels, layer.capsule_dim)


def toy_spec() -> NetworkSpec:
    """Default 8x8 digits network: conv -> primary capsules -> class capsules."""
    return NetworkSpec(
        layers=[
            LayerSpec(LayerKind.CONV2D, "conv1", channels=16, kernel_size=3, padding="same"),
            LayerSpec(LayerKind.PRIMARY_CAPS, "primarycaps", channels=8, kernel_size=3,
                      stride=2, capsule_dim=4, activation="squash"),
            LayerSpec(LayerKind.CLASS_CAPS, "classcaps", channels=10, capsule_dim=8,
                      routing_iters=3, activation="squash"),
        ],
        input_shape=(8, 8, 1),
        num_classes=10,
    )


# --------------------------------------------------------------------------
# model


@dataclass
class Model:
    spec: NetworkSpec
    weights: dict[str, np.ndarray]
    training_loss: list[float] = field(default_factory=list)

    def copy(self) -> "Model":
        return Model(self.spec, {k: v.copy() for k, v in self.weights.items()}, list(self.training_loss))

    @property
    def num_parameters(self) -> int:
        return int(sum(w.size for w in self.weights.values()))

    def to_json(self) -> str:
        return json.dumps(
            {
                "spec": self.spec.to_dict(),
                "weights": {
                    k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                    for k, v in sorted(self.weights.items())
                },
                "training_loss": self.training_loss,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "Model":
        raw = json.loads(text)
        spec = NetworkSpec(**raw["spec"])
        weights = {
            k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
            for k, v in raw["weights"].items()
        }
        expected = weight_shapes(spec)
        if {k: w.shape for k, w in weights.items()} != expected:
            raise ValueError("weight shapes do not match the network spec")
        return cls(spec, weights, raw.get("training_loss", []))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "Model":
        return cls.from_json(Path(path).read_text())


def weight_shapes(spec: NetworkSpec) -> dict[str, tuple[int, ...]]:
    shapes = {}
    prev = spec.input_shape
    for layer, out in zip(spec.layers, spec.shapes()):
        k = layer.kernel_size
        if layer.kind is LayerKind.CLASS_CAPS:
            num_in = int(np.prod(prev[:-1]))
            shapes[f"{layer.name}/W"] = (num_in, layer.channels, layer.capsule_dim, prev[-1])
        else:
            cin = prev[2] if len(prev) == 3 else prev[2] * prev[3]
            cout = layer.channels * (1 if layer.kind is LayerKind.CONV2D else layer.capsule_dim)
            shapes[f"{layer.name}/kernel"] = (k, k, cin, cout)
            shapes[f"{layer.name}/bias"] = (cout,)
        prev = out
    return shapes


def build_network(spec: NetworkSpec, seed: int = 0) -> Model:
    """He-uniform kernels and transformation matrices, zero biases."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in weight_shapes(spec).items():
        if name.endswith("/bias"):
            weights[name] = np.zeros(shape)
            continue
        fan_in = shape[-1] if name.endswith("/W") else int(np.prod(shape[:-1]))
        limit = np.sqrt(6.0 / fan_in)
        weights[name] = rng.uniform(-limit, limit, size=shape)
    return Model(spec, weights)


def extract_sites(spec: NetworkSpec) -> list[Site]:
    """All injection sites in forward order, with per-sample tensor shapes."""
    sites = []
    prev = spec.input_shape
    for layer, out in zip(spec.layers, spec.shapes()):
        n = layer.name
        if layer.kind is LayerKind.CONV2D:
            sites += [Site(n, n, GroupId.MAC_OUTPUTS, out), Site(f"{n}_relu", n, GroupId.ACTIVATIONS, out)]
        elif layer.kind is LayerKind.CLASS_CAPS:
            num_in = int(np.prod(prev[:-1]))
            j, d = out
            sites += [
                Site(f"{n}_uhat", n, GroupId.MAC_OUTPUTS, (num_in, j, d)),
                Site(f"{n}_softmax", n, GroupId.SOFTMAX, (num_in, j)),
                Site(f"{n}_s", n, GroupId.MAC_OUTPUTS, (j, d)),
                Site(f"{n}_squash", n, GroupId.ACTIVATIONS, (j, d)),
                Site(f"{n}_logits", n, GroupId.LOGITS_UPDATE, (num_in, j)),
            ]
        else:
            flat = out[:2] + (out[2] * out[3],)
            sites += [Site(f"{n}_conv", n, GroupId.MAC_OUTPUTS, flat), Site(f"{n}_squash", n, GroupId.ACTIVATIONS, out)]
        prev = out
    return sites


# --------------------------------------------------------------------------
# forward


@dataclass
class RoutingState:
    """Final logits ``b``, coupling coefficients ``k`` and output poses ``v``.

    ``k`` is the softmax output before any noise is added at the softmax site,
    so it always sums to one over output capsules. ``history`` keeps one
    ``(b_in, k, s, v)`` tuple per iteration as used by the forward pass.
    """

    b: np.ndarray
    k: np.ndarray
    v: np.ndarray
    history: list = field(default_factory=list, repr=False)
    k_clean: list = field(default_factory=list, repr=False)


class _Probe:
    """Routes site outputs through the injector and records their ranges."""

    def __init__(self, injector, batch_index, records):
        self.injector = injector
        self.batch_index = batch_index
        self.records = records

    def __call__(self, x, site: Site, iteration: int = 0):
        if self.injector:
            x = self.injector(x, site, (self.batch_index, iteration))
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite values at site {site.name}")
        if self.records is not None:
            self.records[site.name] = TraceRecord(site.name, site.group, site.layer,
                                                  Range(float(x.min()), float(x.max())))
        return x


def dynamic_routing(u_hat, r: int = 3, injector: Injector | None = None,
                    site_prefix: str = "classcaps", *, batch_index: int = 0,
                    _probe=None) -> RoutingState:
    """Routing-by-agreement between two capsule layers.

    ``u_hat`` is ``[num_in, num_out, dim]`` or batched ``[N, num_in, num_out, dim]``.
    Logits start at zero; each iteration computes the coupling softmax over
    output capsules, the weighted sum ``s``, ``v = squash(s)`` and adds the
    agreement ``u_hat . v`` to the logits.
    """
    if r < 1:
        raise ValueError("routing needs at least one iteration")
    u_hat = np.asarray(u_hat, dtype=np.float64)
    if not np.all(np.isfinite(u_hat)):
        raise FloatingPointError("routing input contains non-finite values")
    single = u_hat.ndim == 3
    if single:
        u_hat = u_hat[None]
    probe = _probe or _Probe(injector, batch_index, None)
    p = site_prefix
    s_soft = Site(f"{p}_softmax", p, GroupId.SOFTMAX)
    s_mac = Site(f"{p}_s", p, GroupId.MAC_OUTPUTS)
    s_act = Site(f"{p}_squash", p, GroupId.ACTIVATIONS)
    s_log = Site(f"{p}_logits", p, GroupId.LOGITS_UPDATE)

    b = np.zeros(u_hat.shape[:3])
    history, k_clean = [], []
    for it in range(r):
        k0 = softmax_axis(b, axis=2)
        k_clean.append(k0)
        k = probe(k0, s_soft, it)
        s = probe(np.einsum("nij,nijd->njd", k, u_hat), s_mac, it)
        v = probe(squash(s), s_act, it)
        history.append((b, k, s, v))
        b = probe(b + np.einsum("nijd,njd->nij", u_hat, v), s_log, it)
    state = RoutingState(b, k_clean[-1], v, history, k_clean)
    if single:
        state.b, state.k, state.v = b[0], k_clean[-1][0], v[0]
    return state


def routing_backward(u_hat, state: RoutingState, grad_v):
    """Gradient w.r.t. ``u_hat`` through every routing iteration (batched)."""
    grad_u = np.zeros_like(u_hat)
    grad_b_next = np.zeros(u_hat.shape[:3])
    last = len(state.history) - 1
    for it in range(last, -1, -1):
        _, k, s, v = state.history[it]
        dv = np.einsum("nij,nijd->njd", grad_b_next, u_hat)
        if it == last:
            dv = dv + grad_v
        grad_u += grad_b_next[..., None] * v[:, None]
        ds = squash_backward(s, dv)
        grad_u += k[..., None] * ds[:, None]
        dk = np.einsum("njd,nijd->nij", ds, u_hat)
        grad_b_next = grad_b_next + softmax_backward(k, dk, axis=2)
    return grad_u


@dataclass(frozen=True)
class TraceRecord:
    site: str
    group: GroupId
    layer: str
    range: Range


@dataclass
class ForwardTrace:
    records: list[TraceRecord]
    scores: np.ndarray
    routing: dict[str, RoutingState] = field(default_factory=dict, repr=False)

    def record(self, site: str) -> TraceRecord:
        return next(r for r in self.records if r.site == site)


def _run(model: Model, x, injector, batch_index=0, records=None, cache=None):
    """Shared forward pass. Fills ``cache`` with what the backward pass needs."""
    spec = model.spec
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1:] != spec.input_shape:
        raise ValueError(f"batch shape {x.shape[1:]} does not match network input {spec.input_shape}")
    probe = _Probe(injector, batch_index, records)
    routing = {}
    h = x
    for layer in spec.layers:
        n, W = layer.name, model.weights
        if layer.kind is LayerKind.CLASS_CAPS:
            u = h.reshape(h.shape[0], -1, h.shape[-1])
            u_hat = probe(np.einsum("ijdc,nic->nijd", W[f"{n}/W"], u), Site(f"{n}_uhat", n, GroupId.MAC_OUTPUTS))
            state = dynamic_routing(u_hat, layer.routing_iters, site_prefix=n, _probe=probe)
            routing[n] = state
            if cache is not None:
                cache.append((layer, h, u, u_hat, state))
            h = state.history[-1][3]
            continue
        inp = h if h.ndim == 4 else h.reshape(h.shape[:3] + (-1,))
        pre = conv2d(inp, W[f"{n}/kernel"], layer.stride, layer.padding, bias=W[f"{n}/bias"])
        if layer.kind is LayerKind.CONV2D:
            pre = probe(pre, Site(n, n, GroupId.MAC_OUTPUTS))
            out = probe(np.maximum(pre, 0.0), Site(f"{n}_relu", n, GroupId.ACTIVATIONS))
        else:
            pre = probe(pre, Site(f"{n}_conv", n, GroupId.MAC_OUTPUTS))
            caps = pre.reshape(pre.shape[:3] + (layer.channels, layer.capsule_dim))
            out = probe(squash(caps), Site(f"{n}_squash", n, GroupId.ACTIVATIONS))
        if cache is not None:
            cache.append((layer, h, inp, pre))
        h = out
    scores = np.sqrt((h * h).sum(axis=-1))
    return scores, routing


def forward(model: Model, batch, injector: Injector | None = None, batch_index: int = 0) -> ForwardTrace:
    """Run the network; class score ``c`` is the length of output capsule ``c``."""
    records = {}
    scores, routing = _run(model, batch, injector, batch_index, records)
    return ForwardTrace(list(records.values()), scores, routing)


def predict_scores(model: Model, batch, injector: Injector | None = None, batch_index: int = 0):
    return _run(model, batch, injector, batch_index)[0]


# --------------------------------------------------------------------------
# loss, gradients, training


def margin_loss(scores, labels, *, reduce: bool = True):
    """Capsule margin loss, summed over classes and averaged over the batch.

    ``scores`` is ``[C]`` with a scalar label or ``[N, C]`` with ``N`` labels.
    """
    scores = np.asarray(scores, dtype=np.float64)
    single = scores.ndim == 1
    scores = np.atleast_2d(scores)
    t = np.zeros_like(scores)
    t[np.arange(len(scores)), np.atleast_1d(labels)] = 1.0
    per = (t * np.maximum(0.0, M_PLUS - scores) ** 2
           + LAMBDA_ABSENT * (1 - t) * np.maximum(0.0, scores - M_MINUS) ** 2).sum(axis=1)
    if single:
        return float(per[0])
    return float(per.mean()) if reduce else per


def _margin_grad(scores, labels):
    t = np.zeros_like(scores)
    t[np.arange(len(scores)), labels] = 1.0
    g = -2 * t * np.maximum(0.0, M_PLUS - scores) + 2 * LAMBDA_ABSENT * (1 - t) * np.maximum(0.0, scores - M_MINUS)
    return g / len(scores)


def loss_and_grads(model: Model, images, labels):
    """Mean margin loss of a batch and its gradient for every weight."""
    labels = np.asarray(labels)
    cache = []
    scores, _ = _run(model, images, None, cache=cache)
    loss = margin_loss(scores, labels)
    grads = {}
    g_scores = _margin_grad(scores, labels)
    grad_h = None
    for entry in reversed(cache):
        layer, n = entry[0], entry[0].name
        if layer.kind is LayerKind.CLASS_CAPS:
            _, h_in, u, u_hat, state = entry
            v = state.history[-1][3]
            norm = np.sqrt((v * v).sum(axis=-1, keepdims=True))
            if grad_h is None:
                grad_v = g_scores[..., None] * np.divide(v, norm, out=np.zeros_like(v), where=norm > 0)
            else:
                grad_v = grad_h
            grad_u_hat = routing_backward(u_hat, state, grad_v)
            W = model.weights[f"{n}/W"]
            grads[f"{n}/W"] = np.einsum("nijd,nic->ijdc", grad_u_hat, u)
            grad_h = np.einsum("ijdc,nijd->nic", W, grad_u_hat).reshape(h_in.shape)
            continue
        _, h_in, inp, pre = entry
        if layer.kind is LayerKind.CONV2D:
            grad_pre = grad_h * (pre > 0)
        else:
            caps = pre.reshape(pre.shape[:3] + (layer.channels, layer.capsule_dim))
            grad_pre = squash_backward(caps, grad_h).reshape(pre.shape)
        dx, dk, db = conv2d_backward(inp, model.weights[f"{n}/kernel"], grad_pre, layer.stride, layer.padding)
        grads[f"{n}/kernel"], grads[f"{n}/bias"] = dk, db
        grad_h = dx.reshape(h_in.shape)
    return loss, grads


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 0.1
    batch_size: int = 32
    seed: int = 0
    optimizer: str = "sgd"
    momentum: float = 0.0


def train(model: Model, dataset, config: TrainConfig | None = None) -> Model:
    """Mini-batch gradient descent on the margin loss; returns a new model.

    ``dataset`` needs ``images`` and ``labels`` attributes. The per-epoch mean
    training loss is appended to ``model.training_loss``.
    """
    cfg = config or TrainConfig()
    if len(dataset.labels) == 0:
        raise ValueError("cannot train on an empty dataset")
    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    state = {k: np.zeros_like(v) for k, v in model.weights.items()}
    state2 = {k: np.zeros_like(v) for k, v in model.weights.items()}
    step = 0
    n = len(dataset.labels)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, grads = loss_and_grads(model, dataset.images[idx], dataset.labels[idx])
            except FloatingPointError as exc:
                raise FloatingPointError(f"training diverged at epoch {epoch}: {exc}") from None
            if not np.isfinite(loss):
                raise FloatingPointError(f"training diverged at epoch {epoch} (loss {loss})")
            total += loss * len(idx)
            step += 1
            for k, g in grads.items():
                if cfg.optimizer == "adam":
                    state[k] = 0.9 * state[k] + 0.1 * g
                    state2[k] = 0.999 * state2[k] + 0.001 * g * g
                    mhat = state[k] / (1 - 0.9**step)
                    vhat = state2[k] / (1 - 0.999**step)
                    model.weights[k] -= cfg.lr * mhat / (np.sqrt(vhat) + 1e-8)
                else:
                    state[k] = cfg.momentum * state[k] + g
                    model.weights[k] -= cfg.lr * state[k]
        model.training_loss.append(total / n)
        log.info("epoch %d: loss %.5f", epoch + 1, total / n)
    return model


def evaluate(model: Model, dataset, injector: Injector | None = None, batch_size: int = 256) -> float:
    """Fraction of samples whose largest class score is the label."""
    correct = 0
    for bi, start in enumerate(range(0, len(dataset.labels), batch_size)):
        scores = predict_scores(model, dataset.images[start : start + batch_size], injector, bi)
        correct += int((scores.argmax(axis=1) == dataset.labels[start : start + batch_size]).sum())
    return correct / len(dataset.labels)
