"""Central-difference gradient checks for every op and for the full model."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import functional as F
from . import tensor as T
from .adaptation import AdapterConfig, LoDaModel
from .backbones import CnnConfig, VitConfig, init_frozen
from .metrics import plcc_loss
from .tensor import Tensor, backward

DEFAULT_STEP = 1e-5
TOLERANCE = 1e-4
# Denominator floor: gradients that are exactly zero by construction (the
# head bias under a correlation loss, key biases under softmax) are compared
# in absolute terms instead of dividing difference-quotient noise by ~0.
SCALE_FLOOR = 1e-5


def _scalar(value) -> float:
    return float(np.asarray(getattr(value, "data", value)).reshape(-1)[0])


def finite_diff_grad(f: Callable[[Tensor], object], x: Tensor, h: float = DEFAULT_STEP,
                     indices: Sequence[int] | None = None) -> np.ndarray:
    """(f(x + h e_i) - f(x - h e_i)) / 2h for every flat index (or just ``indices``)."""
    base = np.array(x.data, dtype=np.float64)
    flat_idx = range(base.size) if indices is None else indices
    out = np.zeros(base.size) if indices is None else np.zeros(len(indices))
    with T.no_grad():
        for k, i in enumerate(flat_idx):
            plus = base.copy()
            plus.flat[i] += h
            minus = base.copy()
            minus.flat[i] -= h
            out[k if indices is not None else i] = (_scalar(f(Tensor(plus))) - _scalar(f(Tensor(minus)))) / (2.0 * h)
    return out.reshape(base.shape) if indices is None else out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n), SCALE_FLOOR)
    return float(np.linalg.norm(a - n) / scale)


@dataclass
class CheckResult:
    name: str
    seed: int
    error: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


# op table: name -> (input shapes, function of the input tensors)
def _op_table():
    def conv(x, w, b):
        return F.conv2d(x, w, b, stride=2, padding=1)

    return {
        "matmul": ([(3, 4), (4, 5)], lambda a, b: T.matmul(a, b)),
        "bmm": ([(2, 3, 4), (2, 4, 2)], lambda a, b: T.bmm(a, b)),
        "conv2d": ([(2, 3, 6, 6), (4, 3, 3, 3), (4,)], conv),
        "conv2d_1x1": ([(1, 3, 4, 4), (2, 3, 1, 1), (2,)], lambda x, w, b: F.conv2d(x, w, b)),
        "avgpool2d": ([(2, 2, 8, 8)], lambda x: F.avgpool2d(x, 4)),
        "avgpool2d_uneven": ([(1, 2, 7, 5)], lambda x: F.avgpool2d(x, (3, 2))),
        "affine": ([(3, 4), (4, 2), (2,)], lambda x, w, b: F.affine(x, w, b)),
        "layernorm": ([(3, 6), (6,), (6,)], lambda x, g, b: F.layernorm(x, g, b)),
        "softmax": ([(3, 5)], lambda x: F.softmax(x, axis=-1)),
        "gelu": ([(4, 5)], F.gelu),
        "relu": ([(4, 5)], F.relu),
        "add": ([(3, 4), (4,)], T.add),
        "mul_broadcast": ([(2, 3, 4), (4,)], T.mul),
        "scalar_mul": ([(3, 4)], lambda x: T.scale(x, -2.5)),
        "reshape": ([(2, 6)], lambda x: T.reshape(x, (3, 4))),
        "flatten": ([(2, 3, 2)], lambda x: T.flatten(x, 1)),
        "concat": ([(2, 3), (2, 2)], lambda a, b: T.concat([a, b], axis=1)),
        "transpose": ([(2, 3, 4)], lambda x: T.transpose(x, (2, 0, 1))),
        "mean": ([(3, 4)], lambda x: T.mean(x, axis=0)),
        "sum": ([(3, 4)], lambda x: T.sum(x, axis=1)),
        "div": ([(3,), (3,)], T.div),
        "sqrt": ([(4,)], lambda x: T.sqrt(T.mul(x, x) + 1.0)),
        "getitem": ([(2, 5, 3)], lambda x: x[:, 1:4, :]),
        "plcc_loss": ([(8,)], None),
    }


OPS = tuple(_op_table())


def check_op(name: str, seed: int, h: float = DEFAULT_STEP) -> CheckResult:
    """Compare backward() with finite differences for one op and seed.

    The op output is contracted with a fixed random tensor so that every
    output element contributes to the scalar.
    """
    shapes, fn = _op_table()[name]
    gen = T.rng(seed)
    if name == "plcc_loss":
        labels = gen.normal(size=8)

        def fn(x):
            return plcc_loss(x, labels)

    inputs = [gen.normal(size=s) for s in shapes]
    probe = None

    def scalar(*ts):
        nonlocal probe
        out = fn(*ts)
        if out.size == 1:
            return T.sum(out)
        if probe is None:
            probe = gen.normal(size=out.shape)
        return T.sum(T.mul(out, Tensor(probe)))

    leaves = [Tensor(a, requires_grad=True) for a in inputs]
    backward(scalar(*leaves))
    worst = 0.0
    for k, leaf in enumerate(leaves):
        def f_k(x, k=k):
            args = [Tensor(a) for a in inputs]
            args[k] = x
            return scalar(*args)

        numeric = finite_diff_grad(f_k, Tensor(inputs[k]), h)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(inputs[k])
        worst = max(worst, relative_error(analytic, numeric))
    return CheckResult(name, seed, worst)


def desk_model(seed: int, gate_scale: float = 0.5) -> LoDaModel:
    """Desk-profile LoDa model with random nonzero gates so every path carries gradient."""
    model = LoDaModel(init_frozen(seed, VitConfig(), CnnConfig()), AdapterConfig(), "loda", seed=seed)
    gen = T.rng(seed + 10_000)
    for name, t in model.params.items():
        if name.endswith("gate"):
            t.data = gen.normal(0.0, gate_scale, size=t.shape)
    return model


def check_end_to_end(seed: int, batch: int = 4, coords_per_tensor: int = 2, h: float = DEFAULT_STEP) -> list[CheckResult]:
    """plcc_loss(loda_forward(images)) gradient versus central differences.

    For each trainable tensor a few random coordinates are perturbed; the
    relative error is taken over those coordinates.
    """
    model = desk_model(seed)
    gen = T.rng(seed + 20_000)
    images = Tensor(gen.normal(size=(batch, 3, model.vit_cfg.image_size, model.vit_cfg.image_size)))
    labels = gen.normal(size=batch)
    model.zero_grad()
    backward(plcc_loss(model(images), labels))
    results = []
    for name, param in sorted(model.params.items()):
        idx = sorted(gen.choice(param.size, size=min(coords_per_tensor, param.size), replace=False).tolist())
        original = param.data

        def f(x, param=param):
            param.data = x.data
            try:
                return plcc_loss(model(images), labels)
            finally:
                param.data = original

        numeric = finite_diff_grad(f, Tensor(original), h, indices=idx)
        analytic = param.grad.reshape(-1)[idx]
        results.append(CheckResult(f"loda_forward+plcc_loss:{name}", seed, relative_error(analytic, numeric)))
    return results


def run_suite(seeds: int = 20, end_to_end: bool = True, e2e_seeds: int | None = None,
              log: Callable[[str], None] | None = None) -> list[CheckResult]:
    results = []
    start = time.perf_counter()
    for name in OPS:
        res = [check_op(name, s) for s in range(seeds)]
        results.extend(res)
        if log:
            log(f"{name:20s} max rel err {max(r.error for r in res):.2e}")
    if end_to_end:
        for s in range(seeds if e2e_seeds is None else e2e_seeds):
            res = check_end_to_end(s)
            results.extend(res)
            if log:
                log(f"end-to-end seed {s:2d}  max rel err {max(r.error for r in res):.2e}")
    if log:
        log(f"{len(results)} checks in {time.perf_counter() - start:.1f}s")
    return results
