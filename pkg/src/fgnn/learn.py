"""Training FGNN stacks to predict exact MAP assignments.

Parameters of a stack are visited in a fixed order (steps in order; for
an FGNN layer VF M, VF Q, FV M, FV Q; for a dense step node then factor;
for a residual block its inner steps then the two projections; finally
the readout; within a net each layer's weight then bias). Gradients,
Adam moments and serialised parameter vectors all follow that order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Var
from .errors import ShapeError
from .layers import (DenseStep, FeatureSet, FgnnLayer, FgnnLayerParams, FgnnStack, Residual, Topology,
                     stack_forward)
from .numkit import DenseLayer, DenseNet, glorot_net
from .pgm import score

Assignment = tuple


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-3
    decay: float = 0.98
    epochs: int = 50
    batch_size: int = 16
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0 or self.epochs < 0:
            raise ValueError("learning rate and epochs must be non-negative")
        if not 0 < self.decay <= 1:
            raise ValueError(f"decay must lie in (0, 1], got {self.decay}")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("invalid Adam constants")


# -- parameter traversal ----------------------------------------------------

def _step_nets(step) -> list:
    if isinstance(step, FgnnLayer):
        p = step.params
        return [p.vf_M, p.vf_Q, p.fv_M, p.fv_Q]
    if isinstance(step, DenseStep):
        return [step.node, step.factor]
    if isinstance(step, Residual):
        out = []
        for s in step.inner:
            out += _step_nets(s)
        return out + [step.node_proj, step.factor_proj]
    raise TypeError(f"unknown stack step {type(step).__name__}")


def _stack_nets(s: FgnnStack) -> list:
    out = []
    for step in s.layers:
        out += _step_nets(step)
    return [n for n in out + [s.readout] if n is not None]


def stack_params(s: FgnnStack) -> list[np.ndarray]:
    """Copies of every weight and bias in traversal order."""
    out = []
    for net in _stack_nets(s):
        for layer in net.layers:
            out += [np.array(layer.weight), np.array(layer.bias)]
    return out


def _rebuild_net(net: DenseNet | None, it) -> DenseNet | None:
    if net is None:
        return None
    layers = tuple(DenseLayer(next(it), next(it), l.activation) for l in net.layers)
    return DenseNet(layers, net.in_dim)


def _rebuild_step(step, it):
    if isinstance(step, FgnnLayer):
        p = step.params
        nets = [_rebuild_net(n, it) for n in (p.vf_M, p.vf_Q, p.fv_M, p.fv_Q)]
        return FgnnLayer(FgnnLayerParams(*nets, p.vf_m, p.vf_n, p.fv_m, p.fv_n), step.activation)
    if isinstance(step, DenseStep):
        return DenseStep(_rebuild_net(step.node, it), _rebuild_net(step.factor, it))
    inner = tuple(_rebuild_step(s, it) for s in step.inner)
    return Residual(inner, _rebuild_net(step.node_proj, it), _rebuild_net(step.factor_proj, it))


def rebuild_stack(template: FgnnStack, params: Sequence[np.ndarray]) -> FgnnStack:
    """Inverse of :func:`stack_params` against the template's structure."""
    shapes = [p.shape for p in stack_params(template)]
    if len(params) != len(shapes) or any(np.shape(a) != s for a, s in zip(params, shapes)):
        raise ShapeError("parameter list does not match the stack template")
    it = iter(params)
    layers = tuple(_rebuild_step(s, it) for s in template.layers)
    return FgnnStack(layers, _rebuild_net(template.readout, it))


# -- taped forward pass -----------------------------------------------------

class _Graph:
    """Topology plus the index arrays the taped forward needs."""

    def __init__(self, top: Topology):
        self.top = top
        self.by_factor = top.groups("factor")
        self.by_var = top.groups("variable")


def _net(tape: Tape, net: DenseNet | None, x: Var, it) -> Var:
    if net is None:
        return x
    if x.shape[-1] != net.in_dim:
        raise ShapeError(f"net takes {net.in_dim} inputs, got {x.shape[-1]}")
    for layer in net.layers:
        x = tape.affine(x, next(it), next(it))
        if layer.activation == "relu":
            x = tape.relu(x)
    return x


def _act(tape: Tape, x: Var, activation: str) -> Var:
    return tape.relu(x) if activation == "relu" else x


def _side(tape, gr: _Graph, M, Q, m, n, factor: Var, node: Var, edge: Var, groups, it) -> Var:
    top = gr.top
    x = tape.concat(tape.gather(factor, top.edge_factor), tape.gather(node, top.edge_var))
    mv = _net(tape, M, x, it)
    if Q.depth == 1 and Q.layers[0].activation == "identity":
        prod = tape.edge_bilinear(edge, mv, next(it), next(it), m, n)
    else:
        prod = tape.edge_matvec(_net(tape, Q, edge, it), mv, m, n)
    return tape.segment_max(prod, *groups)


def _step(tape: Tape, gr: _Graph, step, node: Var, factor: Var, edge: Var, it):
    if isinstance(step, FgnnLayer):
        p = step.params
        factor = _act(tape, _side(tape, gr, p.vf_M, p.vf_Q, p.vf_m, p.vf_n, factor, node, edge,
                                  gr.by_factor, it), step.activation)
        node = _act(tape, _side(tape, gr, p.fv_M, p.fv_Q, p.fv_m, p.fv_n, factor, node, edge,
                                gr.by_var, it), step.activation)
        return node, factor
    if isinstance(step, DenseStep):
        return _net(tape, step.node, node, it), _net(tape, step.factor, factor, it)
    if isinstance(step, Residual):
        n2, f2 = node, factor
        for s in step.inner:
            n2, f2 = _step(tape, gr, s, n2, f2, edge, it)
        skip_n = _net(tape, step.node_proj, node, it)
        skip_f = _net(tape, step.factor_proj, factor, it)
        if skip_n.shape != n2.shape or skip_f.shape != f2.shape:
            raise ShapeError("residual branch and skip connection widths differ")
        return tape.add(n2, skip_n), tape.add(f2, skip_f)
    raise TypeError(f"unknown stack step {type(step).__name__}")


def taped_forward(tape: Tape, s: FgnnStack, top: Topology, feats: FeatureSet,
                  params: Sequence[Var]) -> Var:
    """Node logits of ``s`` recorded on ``tape`` with ``params`` as leaves."""
    gr = _Graph(top)
    it = iter(params)
    node, factor = tape.constant(feats.node), tape.constant(feats.factor)
    edge = tape.constant(feats.edge)
    for step in s.layers:
        node, factor = _step(tape, gr, step, node, factor, edge, it)
    return _net(tape, s.readout, node, it)


def _as_labels(label, n_rows: int, n_classes: int) -> np.ndarray:
    y = np.asarray(label, dtype=np.int64)
    if y.shape != (n_rows,):
        raise ValueError(f"{y.size} labels for {n_rows} variables")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise IndexError("label state out of range")
    return y


def value_and_grad(s: FgnnStack, g, feats: FeatureSet, label) -> tuple[float, list[np.ndarray], Tape]:
    """Loss, gradients in traversal order, and the spent tape.

    ``tape.margin`` and ``tape.signature`` tell whether the point is near
    a tie in some max or whether two points share a linear piece.
    """
    top = g if isinstance(g, Topology) else Topology.from_graph(g)
    tape = Tape()
    leaves = [tape.leaf(p) for p in stack_params(s)]
    logits = taped_forward(tape, s, top, feats, leaves)
    y = _as_labels(label, logits.shape[0], logits.shape[1])
    loss = tape.softmax_xent(logits, y)
    tape.backward(loss)
    grads = [np.zeros_like(v.value) if v.grad is None else v.grad for v in leaves]
    return float(loss.value), grads, tape


def backward(s: FgnnStack, g, feats: FeatureSet, label) -> list[np.ndarray]:
    return value_and_grad(s, g, feats, label)[1]


def loss_map_xent(node_logits, label) -> float:
    """Mean over variables of softmax cross-entropy against the label state."""
    if len(node_logits) != len(label):
        raise ValueError(f"{len(node_logits)} logit vectors for {len(label)} labels")
    total = 0.0
    for z, y in zip(node_logits, label):
        z = np.asarray(z, dtype=np.float64)
        if not 0 <= y < z.size:
            raise IndexError(f"label {y} out of range for {z.size} states")
        top = z.max()
        total += top + np.log(np.exp(z - top).sum()) - z[y]
    return total / len(label) if len(label) else 0.0


def agreement(pred: Assignment, label: Assignment) -> float:
    if len(pred) != len(label):
        raise ValueError(f"assignment lengths differ: {len(pred)} vs {len(label)}")
    if not len(label):
        return 1.0
    return float(np.mean(np.asarray(pred) == np.asarray(label)))


def map_agreement(g, pred: Assignment, label: Assignment) -> float:
    """Agreement, except that a prediction scoring exactly as well as the
    label is itself a MAP assignment and counts as full agreement."""
    if score(g, pred) == score(g, label):
        return 1.0
    return agreement(pred, label)


# -- prediction and training ------------------------------------------------

def _batch(instances):
    top = Topology.union([Topology.from_graph(i.graph) for i in instances])
    feats = FeatureSet.concat([i.features for i in instances])
    labels = np.concatenate([np.asarray(i.label, dtype=np.int64) for i in instances])
    return top, feats, labels


def predict(s: FgnnStack, instances, chunk: int = 64) -> list[Assignment]:
    """Argmax of the node logits per instance, ties to the smallest state."""
    out = []
    for start in range(0, len(instances), chunk):
        part = instances[start:start + chunk]
        top, feats, _ = _batch(part)
        logits = stack_forward(s, top, feats).node
        states = np.argmax(logits, axis=1)
        pos = 0
        for inst in part:
            n = inst.graph.n_variables
            out.append(tuple(int(x) for x in states[pos:pos + n]))
            pos += n
    return out


def evaluate(s: FgnnStack, instances) -> tuple[float, float]:
    """Mean and standard deviation of per-instance agreement."""
    if not instances:
        raise ValueError("no instances to evaluate")
    scores = [map_agreement(i.graph, p, i.label) for p, i in zip(predict(s, instances), instances)]
    return float(np.mean(scores)), float(np.std(scores))


class Adam:
    def __init__(self, params: Sequence[np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: Sequence[np.ndarray], lr: float) -> list[np.ndarray]:
        c = self.cfg
        self.t += 1
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = c.beta1 * self.m[i] + (1 - c.beta1) * g
            self.v[i] = c.beta2 * self.v[i] + (1 - c.beta2) * g * g
            mhat = self.m[i] / (1 - c.beta1 ** self.t)
            vhat = self.v[i] / (1 - c.beta2 ** self.t)
            out.append(p - lr * mhat / (np.sqrt(vhat) + c.eps))
        return out


def train(dataset, cfg: TrainConfig, arch: FgnnStack, val=None,
          on_epoch: Callable[[dict], None] | None = None) -> tuple[FgnnStack, list[dict]]:
    """Adam over shuffled mini-batches with geometric per-epoch decay.

    The shuffle stream is ``numpy.random.default_rng(cfg.seed)``; each
    mini-batch is one disjoint union of its graphs, so its loss is the
    mean cross-entropy over all variables in the batch. Returns the
    trained stack and one log record per epoch.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty training set")
    shapes = {(i.features.node.shape[1], i.features.factor.shape[1], i.features.edge.shape[1])
              for i in dataset}
    if len(shapes) != 1:
        raise ShapeError("training instances have differing feature widths")
    rng = np.random.default_rng(cfg.seed)
    params = stack_params(arch)
    opt = Adam(params, cfg)
    stack = arch
    log = []
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * cfg.decay ** epoch
        order = rng.permutation(len(dataset))
        losses, weights = [], []
        for start in range(0, len(order), cfg.batch_size):
            top, feats, labels = _batch([dataset[j] for j in order[start:start + cfg.batch_size]])
            loss, grads, _ = value_and_grad(stack, top, feats, labels)
            params = opt.step(params, grads, lr)
            stack = rebuild_stack(arch, params)
            losses.append(loss)
            weights.append(labels.size)
        rec = {"epoch": epoch + 1, "lr": lr,
               "train_agreement": evaluate(stack, dataset)[0],
               "val_agreement": evaluate(stack, val)[0] if val else None,
               "loss": float(np.average(losses, weights=weights))}
        log.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return stack, log


def write_log(path, log: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        for rec in log:
            fh.write(json.dumps(rec) + "\n")


# -- architecture presets ---------------------------------------------------

def fgnn_block(rng: np.random.Generator, node_in: int, factor_in: int, edge_in: int, width: int,
               activation: str = "relu") -> FgnnLayer:
    """VF and FV steps with one-layer ReLU M nets and linear Q nets."""
    vf_M = glorot_net(rng, [factor_in + node_in, width], "relu")
    vf_Q = glorot_net(rng, [edge_in, width * width], "identity")
    fv_M = glorot_net(rng, [width + node_in, width], "relu")
    fv_Q = glorot_net(rng, [edge_in, width * width], "identity")
    return FgnnLayer(FgnnLayerParams(vf_M, vf_Q, fv_M, fv_Q, width, width, width, width), activation)


def dense_block(rng: np.random.Generator, width: int) -> DenseStep:
    return DenseStep(glorot_net(rng, [width, width], "relu"), glorot_net(rng, [width, width], "relu"))


ARCH_PRESETS = ("desk",)


def build_arch(preset: str, dims: tuple[int, int, int], seed: int = 0, n_states: int = 2,
               width: int = 32) -> FgnnStack:
    """Initialised stack for ``dims = (node, factor, edge)`` feature widths.

    ``desk``: FGNN, a residual block [dense, FGNN, dense] with identity
    skip, FGNN, then a linear readout to ``n_states`` logits.
    """
    if preset not in ARCH_PRESETS:
        raise ValueError(f"unknown architecture preset {preset!r}")
    dn, dg, dt = dims
    rng = np.random.default_rng(seed)
    first = fgnn_block(rng, dn, dg, dt, width)
    res = Residual((dense_block(rng, width), fgnn_block(rng, width, width, dt, width), dense_block(rng, width)))
    last = fgnn_block(rng, width, width, dt, width)
    readout = glorot_net(rng, [width, n_states], "identity")
    return FgnnStack((first, res, last), readout)
