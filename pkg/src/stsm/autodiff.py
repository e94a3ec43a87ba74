"""Reverse-mode differentiation over the network's primitive operations.

:func:`stsm.graph.forward_network` records each primitive on a :class:`Tape`.
:func:`backward` then walks the tape in reverse and applies the rule
registered for each op. :func:`finite_diff_check` is the independent central
difference reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .errors import ContractError, ShapeError
from .shift import apply_stsm, shift_adjoint


@dataclass
class Record:
    op: str
    inputs: tuple
    output: int
    layer: str | None
    saved: dict
    value: object = field(repr=False, default=None)


class Tape:
    """Ordered log of executed primitives. Keys are small integers."""

    def __init__(self):
        self.records: list[Record] = []
        self.inputs: list[int] = []
        self._next = 0

    def _key(self) -> int:
        self._next += 1
        return self._next - 1

    def input(self, value) -> int:
        key = self._key()
        self.inputs.append(key)
        return key

    def push(self, op, inputs, value, layer=None, saved=None) -> int:
        if op not in BACKWARD_RULES:
            raise ContractError(f"no backward rule registered for {op!r}")
        key = self._key()
        self.records.append(Record(op, tuple(inputs), key, layer, saved or {}, value))
        return key

    @property
    def head(self) -> int | None:
        if self.records:
            return self.records[-1].output
        return self.inputs[-1] if self.inputs else None


# Each rule maps (upstream grad, saved) -> (input grads, param grads or None).
def _conv(g, s):
    dx, dw, db = F.conv2d_backward(g, s["cache"])
    grads = {"weight": dw}
    if db is not None:
        grads["bias"] = db
    return (dx,), grads


def _bn_train(g, s):
    dx, dgamma, dbeta = F.batchnorm_train_backward(g, s["cache"])
    return (dx,), {"weight": dgamma, "bias": dbeta}


def _bn_eval(g, s):
    dx, dgamma, dbeta = F.batchnorm_eval_backward(g, s["cache"])
    return (dx,), {"weight": dgamma, "bias": dbeta}


def _linear(g, s):
    dx, dw, db = F.linear_backward(g, s["cache"])
    return (dx,), {"weight": dw, "bias": db}


BACKWARD_RULES = {
    "conv2d": _conv,
    "batchnorm_train": _bn_train,
    "batchnorm_eval": _bn_eval,
    "relu": lambda g, s: ((F.relu_backward(g, s["mask"]),), None),
    "maxpool2d": lambda g, s: ((F.maxpool2d_backward(g, s["cache"]),), None),
    # the backward of a zero-fill shift is the opposite zero-fill shift
    "stsm": lambda g, s: ((apply_stsm(g, shift_adjoint(s["spec"])),), None),
    "spatial_mean": lambda g, s: ((F.spatial_mean_backward(g, s["xshape"]),), None),
    "temporal_mean": lambda g, s: ((F.temporal_mean_backward(g, s["xshape"]),), None),
    "linear": _linear,
    "add": lambda g, s: ((g, g), None),
    "sum": lambda g, s: ((np.full(s["shape"], float(g)),), None),
    "softmax_xent": lambda g, s: ((F.softmax_cross_entropy_backward(g, s["cache"]),), None),
}


@dataclass
class GradientSet:
    params: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)

    @property
    def input(self):
        """Gradient w.r.t. the first tape input, if requested."""
        return next(iter(self.inputs.values()), None)

    def get(self, layer, pname):
        return self.params[layer][pname]


def sum_loss(tape: Tape, x):
    """Scalar ``x.sum()`` recorded on ``tape`` after its current head."""
    x = np.asarray(x)
    value = np.asarray(x.sum())
    tape.push("sum", (tape.head,), value, saved={"shape": x.shape})
    return float(value)


def softmax_cross_entropy(logits, labels, tape: Tape | None = None) -> float:
    """Batch-mean cross-entropy; with ``tape`` the loss becomes the new head."""
    loss, cache = F.softmax_cross_entropy(logits, labels)
    if tape is not None:
        tape.push("softmax_xent", (tape.head,), np.asarray(loss), saved={"cache": cache})
    return loss


def backward(tape: Tape, loss_grad: float = 1.0, wrt_input: bool = False) -> GradientSet:
    if not tape.records:
        raise ContractError("empty tape")
    head = tape.records[-1]
    if np.ndim(head.value) != 0:
        raise ContractError(f"tape head {head.op!r} is not a scalar loss (shape {np.shape(head.value)})")
    grads = {head.output: np.asarray(float(loss_grad))}
    result = GradientSet()
    for rec in reversed(tape.records):
        g = grads.pop(rec.output, None)
        if g is None:
            continue
        in_grads, param_grads = BACKWARD_RULES[rec.op](g, rec.saved)
        if param_grads:
            slot = result.params.setdefault(rec.layer, {})
            for pname, pg in param_grads.items():
                slot[pname] = slot[pname] + pg if pname in slot else pg
        for key, ig in zip(rec.inputs, in_grads):
            if key is None:
                continue
            grads[key] = grads[key] + ig if key in grads else ig
    if wrt_input:
        for key in tape.inputs:
            if key in grads:
                result.inputs[key] = grads[key]
    return result


def sgd_step(params, grads: GradientSet, lr, momentum=0.9, weight_decay=1e-4):
    """In-place SGD with momentum and L2 decay folded into the velocity:
    ``v <- momentum*v + grad + weight_decay*param``, ``param <- param - lr*v``.
    Returns ``params``."""
    for layer, pname, value in params.items():
        g = grads.params.get(layer, {}).get(pname)
        if g is None:
            g = np.zeros_like(value)
        if g.shape != value.shape:
            raise ContractError(f"{layer}.{pname}: grad {g.shape} vs param {value.shape}")
        slot = params.velocity.setdefault(layer, {})
        step = g + weight_decay * value
        prev = slot.get(pname)
        v = step if prev is None else momentum * prev + step
        slot[pname] = v
        value -= lr * v
    return params


def loss_and_grads(graph, x, labels, train=True):
    """Cross-entropy loss and parameter gradients for one batch."""
    from .graph import forward_network

    tape = Tape()
    logits = forward_network(graph, x, train=train, tape=tape)
    loss = softmax_cross_entropy(logits, labels, tape)
    return loss, backward(tape)


# ---------------------------------------------------------------- gradient check


@dataclass
class FDReport:
    max_rel_error: dict
    checked: dict
    excluded: dict
    tolerance: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance

    def summary(self) -> str:
        lines = [f"tolerance {self.tolerance:g}  worst {self.worst:.3e}  {'PASS' if self.passed else 'FAIL'}"]
        for name in sorted(self.max_rel_error):
            lines.append(
                f"  {name:<28} max_rel={self.max_rel_error[name]:.3e} "
                f"checked={self.checked[name]} excluded={self.excluded[name]}"
            )
        return "\n".join(lines)


REL_FLOOR = 1e-6


def _signature(tape: Tape):
    # piecewise-linear branch choices: relu masks and max-pool winners
    sig = []
    for rec in tape.records:
        if rec.op == "relu":
            sig.append(rec.saved["mask"])
        elif rec.op == "maxpool2d":
            sig.append(rec.saved["cache"][0])
    return sig


def _same_branch(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(u, v) for u, v in zip(a, b))


def finite_diff_check(
    graph, x, labels=None, params=None, step=1e-5, tolerance=1e-4, loss="xent", train=True
) -> FDReport:
    """Compare analytic gradients against central differences.

    ``params`` selects ``(layer, pname)`` pairs (default: all). An entry is
    excluded when the +/- perturbations change any relu mask or max-pool
    winner, since the loss is not differentiable across that kink.
    Relative error is ``|a - n| / max(|a|, |n|, 1e-6)``. The floor sits well
    above the central-difference round-off (one ulp of the loss over
    ``2*step``, about 1e-11 at the default step), so gradients that are
    exactly zero do not fail on quantization noise alone.
    """
    from .graph import forward_network

    if step <= 0:
        raise ShapeError("finite-difference step must be positive")
    if loss == "xent" and labels is None:
        raise ContractError("cross-entropy check needs labels")

    def evaluate():
        tape = Tape()
        out = forward_network(graph, x, train=train, tape=tape, update_stats=False)
        if loss == "xent":
            value = softmax_cross_entropy(out, labels, tape)
        else:
            value = sum_loss(tape, out)
        return value, tape

    _, tape = evaluate()
    base_sig = _signature(tape)
    analytic = backward(tape)
    if params is None:
        params = [(layer, pname) for layer, pname, _ in graph.params.items()]

    errors, checked, excluded = {}, {}, {}
    for layer, pname in params:
        value = graph.params.tensors[layer][pname]
        grad = analytic.params.get(layer, {}).get(pname, np.zeros_like(value))
        name = f"{layer}.{pname}"
        errors[name], checked[name], excluded[name] = 0.0, 0, 0
        flat, gflat = value.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            plus, tp = evaluate()
            flat[i] = orig - step
            minus, tm = evaluate()
            flat[i] = orig
            if not (_same_branch(base_sig, _signature(tp)) and _same_branch(base_sig, _signature(tm))):
                excluded[name] += 1
                continue
            numeric = (plus - minus) / (2 * step)
            a = gflat[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), REL_FLOOR)
            errors[name] = max(errors[name], rel)
            checked[name] += 1
    return FDReport(errors, checked, excluded, tolerance)
