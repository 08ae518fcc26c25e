"""Central finite-difference checks of every hand-written backward pass.

Each case wraps a layer (or the whole model) in a scalar loss and compares
the analytic gradient of every parameter tensor, and of the input where the
layer exposes one, against ``(L(w + h) - L(w - h)) / 2h`` at 64-bit.

A coordinate whose +-h perturbation flips any ReLU gate is resampled: the
loss is not differentiable across the kink, so the difference quotient
there says nothing about the backward pass.
"""

from __future__ import annotations

import time
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from .losses import batch_cross_entropy
from .masking import apply_masks, plan_mask
from .model import (
    CLS_DIM,
    SEP_DIM,
    SEP_POS,
    MbmHead,
    ModelConfig,
    NtpHead,
    PairedSequenceTransformer,
    SgHead,
    softmax2,
)
from .numerics.layers import (
    Dropout,
    EncoderBlock,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    ReLU,
)

DEFAULT_STEP = 1e-3
DEFAULT_TOLERANCE = 1e-5
DEFAULT_COORDS = 100
# gradients below this are compared absolutely; some are exactly zero by
# symmetry (key bias under softmax) and the difference quotient there is
# pure roundoff
GRAD_FLOOR = 1e-6

TINY_MODEL = ModelConfig(d_model=12, seq_positions=12, n_layers=1, n_heads=2,
                         forward_expansion=4, dropout_p=0.1)


@dataclass
class TensorReport:
    name: str
    n_checked: int
    n_resampled: int
    max_rel_error: float


@dataclass
class CaseReport:
    layer_type: str
    tensors: list[TensorReport] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((t.max_rel_error for t in self.tensors), default=0.0)

    @property
    def n_checked(self) -> int:
        return sum(t.n_checked for t in self.tensors)


@dataclass
class GradCheckReport:
    cases: list[CaseReport]
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return all(c.max_rel_error < self.tolerance for c in self.cases)

    def lines(self) -> list[str]:
        out = [f"{'layer type':<22} {'coords':>7} {'max rel err':>12}  status"]
        for c in self.cases:
            ok = "ok" if c.max_rel_error < self.tolerance else "FAIL"
            out.append(f"{c.layer_type:<22} {c.n_checked:>7} {c.max_rel_error:>12.3e}  {ok}")
        verdict = "PASS" if self.passed else "FAIL"
        out.append(f"{verdict}: tolerance {self.tolerance:g}, {self.seconds:.1f}s")
        return out


@dataclass
class Case:
    """``run(backward)`` returns the scalar loss and, with backward, input grads."""

    layer_type: str
    module: Module
    inputs: dict[str, np.ndarray]
    run: Callable[[bool], tuple[float, dict[str, np.ndarray]]]


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), GRAD_FLOOR)


def _relu_gates(module: Module) -> bytes:
    gates = []

    def walk(m):
        for v in vars(m).values():
            if isinstance(v, ReLU) and v._mask is not None:
                gates.append(v._mask.tobytes())
            elif isinstance(v, Module):
                walk(v)
            elif isinstance(v, list):
                for c in v:
                    if isinstance(c, Module):
                        walk(c)

    walk(module)
    return b"".join(gates)


def check_case(case: Case, rng: np.random.Generator, n_coords: int = DEFAULT_COORDS,
               step: float = DEFAULT_STEP) -> CaseReport:
    case.module.zero_grads()
    _, input_grads = case.run(True)
    base_gates = _relu_gates(case.module)
    targets = [(name, p.value, p.grad.copy()) for name, p in case.module.named_parameters()]
    targets += [(f"input:{k}", case.inputs[k], input_grads[k]) for k in input_grads]
    report = CaseReport(case.layer_type)
    for name, arr, grad in targets:
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        # every coordinate of small tensors, else a random sample of n_coords
        if flat.size <= n_coords:
            queue = list(range(flat.size))
        else:
            queue = rng.choice(flat.size, size=n_coords, replace=False).tolist()
        checked, resampled, worst = 0, 0, 0.0
        attempts = 0
        while queue:
            i = queue.pop()
            attempts += 1
            orig = flat[i]
            flat[i] = orig + step
            lp, _ = case.run(False)
            gates_p = _relu_gates(case.module)
            flat[i] = orig - step
            lm, _ = case.run(False)
            gates_m = _relu_gates(case.module)
            flat[i] = orig
            if (gates_p != base_gates or gates_m != base_gates) and attempts < 20 * n_coords:
                resampled += 1
                if flat.size > n_coords:
                    queue.append(int(rng.integers(flat.size)))
                continue
            numeric = (lp - lm) / (2 * step)
            worst = max(worst, relative_error(float(gflat[i]), numeric))
            checked += 1
        report.tensors.append(TensorReport(name, checked, resampled, worst))
    return report


# cases ------------------------------------------------------------------------


def _probe(rng, shape):
    return rng.standard_normal(shape)


def _dropout_rng():
    return np.random.default_rng(12345)


def _layer_case(layer_type, module, x, forward, rng) -> Case:
    inputs = {"x": x}
    probe = None

    def run(backward):
        nonlocal probe
        out = forward(inputs["x"])
        if probe is None:
            probe = _probe(rng, out.shape)
        loss = float(np.sum(out * probe))
        if not backward:
            return loss, {}
        return loss, {"x": module.backward(probe)}

    return Case(layer_type, module, inputs, run)


def layer_cases(rng: np.random.Generator, d: int = 12, n_heads: int = 2) -> list[Case]:
    f8 = np.float64
    cases = []

    lin = Linear(7, 5, rng, f8)
    cases.append(_layer_case("Linear", lin, rng.standard_normal((3, 7)), lin.forward, rng))

    relu = ReLU()
    x = rng.uniform(0.1, 1.0, (4, 6)) * rng.choice([-1.0, 1.0], (4, 6))
    cases.append(_layer_case("ReLU", relu, x, relu.forward, rng))

    ln = LayerNorm(8, dtype=f8)
    ln.gamma.value[:] = rng.uniform(0.5, 1.5, 8)
    ln.beta.value[:] = rng.standard_normal(8)
    cases.append(_layer_case("LayerNorm", ln, rng.standard_normal((5, 8)), ln.forward, rng))

    drop = Dropout(0.3)
    cases.append(_layer_case("Dropout", drop, rng.standard_normal((4, 6)),
                             lambda x: drop.forward(x, True, _dropout_rng()), rng))

    mha = MultiHeadAttention(d, n_heads, 0.1, rng, f8)
    cases.append(_layer_case("MultiHeadAttention", mha, rng.standard_normal((2, 5, d)),
                             lambda x: mha.forward(x, True, _dropout_rng()), rng))

    ff = FeedForward(d, 4, rng, f8)
    cases.append(_layer_case("FeedForward", ff, rng.standard_normal((2, 5, d)), ff.forward, rng))

    block = EncoderBlock(d, n_heads, 4, 0.1, rng, f8)
    cases.append(_layer_case("EncoderBlock", block, rng.standard_normal((2, 5, d)),
                             lambda x: block.forward(x, True, _dropout_rng()), rng))

    labels = np.array([1, 0, 1])
    for name, head in (("NtpHead+CE", NtpHead(d, d // 2, rng, f8)), ("SgHead+CE", SgHead(d, rng, f8))):
        cases.append(_ce_head_case(name, head, rng.standard_normal((3, d)), labels))

    mbm = MbmHead(d, 2 * d, rng, f8)
    target = rng.standard_normal((3, d))
    inputs = {"x": rng.standard_normal((3, d))}

    def run_mbm(backward, mbm=mbm, inputs=inputs, target=target):
        err = mbm.forward(inputs["x"]) - target
        loss = float(np.mean(np.mean(err**2, axis=1)))
        if not backward:
            return loss, {}
        return loss, {"x": mbm.backward(2 * err / err.size)}

    cases.append(Case("MbmHead+MSE", mbm, inputs, run_mbm))
    return cases


def _ce_head_case(name, head, x, labels) -> Case:
    inputs = {"x": x}

    def run(backward):
        probs = softmax2(head.forward(inputs["x"]))
        loss = float(np.mean(batch_cross_entropy(probs, labels)))
        if not backward:
            return loss, {}
        g = probs.copy()
        g[np.arange(len(labels)), labels] -= 1
        return loss, {"x": head.backward(g / len(labels))}

    return Case(name, head, inputs, run)


def model_inputs(config: ModelConfig, rng: np.random.Generator, batch: int = 2) -> np.ndarray:
    d = config.d_model
    x = np.zeros((batch, config.seq_positions, d))
    x[:, 0, CLS_DIM] = 1
    x[:, SEP_POS, SEP_DIM] = 1
    data = [p for p in range(1, config.seq_positions) if p != SEP_POS]
    x[:, data, 3:] = rng.standard_normal((batch, len(data), d - 3))
    return x


def model_cases(config: ModelConfig, rng: np.random.Generator) -> list[Case]:
    """The composed model under the multitask loss and under the SG loss."""
    from .trainer import MaskedRows, forward_losses

    cases = []
    for task in ("ntp", "sg"):
        model = PairedSequenceTransformer(config, seed=rng, dtype=np.float64)
        x = model_inputs(config, rng)
        labels = np.array([1, 0])
        masked = None
        if task == "ntp":
            pool = rng.standard_normal((6, config.d_model))
            plans = [plan_mask(np.random.default_rng([7, i]), len(pool)) for i in range(len(x))]
            x, rows, cols, targets = apply_masks(x, plans, pool)
            masked = MaskedRows(rows, cols, targets)

        def run(backward, model=model, x=x, labels=labels, task=task, masked=masked):
            out = forward_losses(model, x, labels, task, masked=masked, alpha1=0.3, alpha2=0.7,
                                 train=True, rng=_dropout_rng(), backward=backward)
            return float(np.mean(out.total)), {}

        name = "Model(multitask)" if task == "ntp" else "Model(same-genre)"
        cases.append(Case(name, model, {}, run))
    return cases


def run_gradcheck(config: ModelConfig = TINY_MODEL, *, tolerance: float = DEFAULT_TOLERANCE,
                  n_coords: int = DEFAULT_COORDS, step: float = DEFAULT_STEP, seed: int = 0
                  ) -> GradCheckReport:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    cases = layer_cases(rng, config.d_model, config.n_heads) + model_cases(config, rng)
    reports = [check_case(c, rng, n_coords, step) for c in cases]
    return GradCheckReport(reports, tolerance, time.perf_counter() - t0)
