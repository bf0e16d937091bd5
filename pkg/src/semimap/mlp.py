"""Shallow fully-connected decoders with exact hand-derived gradients.

No autodiff: forward passes keep a trace, backward passes replay it. The
decoders are small (default two ReLU hidden layers of width 32, linear
output head), so plain numpy matmuls are all that is needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import TrainingError


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax (max-subtracted)."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class ForwardTrace:
    """Cached tensors from one forward call, consumed by backward."""

    x: np.ndarray  # (n, in)
    pre: list  # pre-activations per layer, (n, out_l)
    act: list  # post-ReLU activations for hidden layers


@dataclass
class MlpGrads:
    """Per-layer parameter gradients, shapes mirroring the Mlp."""

    weights: list
    biases: list

    def add_scaled(self, other: "MlpGrads", scale: float = 1.0):
        for w, ow in zip(self.weights, other.weights):
            w += scale * ow
        for b, ob in zip(self.biases, other.biases):
            b += scale * ob
        return self


class Mlp:
    """Affine/ReLU stack with a linear output head.

    sizes = [in, hidden..., out]; hidden activations are ReLU, the output is
    linear (SDF scalar or class/instance logits).
    """

    def __init__(self, sizes, seed: int = 0):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.sizes = sizes
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / fan_in)  # Kaiming-uniform, ReLU gain
            self.weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            self.biases.append(np.zeros(fan_out))

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "Mlp":
        m = Mlp.__new__(Mlp)
        m.sizes = list(self.sizes)
        m.weights = [w.copy() for w in self.weights]
        m.biases = [b.copy() for b in self.biases]
        return m

    def zero_grads(self) -> MlpGrads:
        return MlpGrads(
            [np.zeros_like(w) for w in self.weights],
            [np.zeros_like(b) for b in self.biases],
        )

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, ForwardTrace]:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.in_dim:
            raise ValueError(f"input width {x.shape[1]} != expected {self.in_dim}")
        pre, act = [], []
        h = x
        last = self.n_layers - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            pre.append(z)
            if l < last:
                h = np.maximum(z, 0.0)
                act.append(h)
        return pre[-1], ForwardTrace(x, pre, act)

    def backward(self, trace: ForwardTrace, d_out: np.ndarray):
        """Exact gradients of sum(d_out * output) w.r.t. params and input."""
        d_out = np.atleast_2d(np.asarray(d_out, dtype=np.float64))
        if d_out.shape != trace.pre[-1].shape:
            raise ValueError("d_out shape mismatch with trace")
        grads = self.zero_grads()
        delta = d_out
        for l in range(self.n_layers - 1, -1, -1):
            inp = trace.x if l == 0 else trace.act[l - 1]
            grads.weights[l] += delta.T @ inp
            grads.biases[l] += delta.sum(axis=0)
            if l > 0:
                delta = (delta @ self.weights[l]) * (trace.pre[l - 1] > 0.0)
            else:
                d_in = delta @ self.weights[0]
        return grads, d_in

    def input_jacobian_scalar(self, trace: ForwardTrace) -> np.ndarray:
        """d(output)/d(input) rows for a scalar-output decoder: (n, in)."""
        if self.out_dim != 1:
            raise ValueError("input_jacobian_scalar requires a scalar head")
        _, d_in = self.backward(trace, np.ones_like(trace.pre[-1]))
        return d_in

    def directional_param_grads(
        self, trace: ForwardTrace, direction: np.ndarray, coeff: np.ndarray
    ) -> MlpGrads:
        """Gradients w.r.t. parameters of sum_i coeff_i * D_{direction_i} f(x_i).

        D_r f is the input-directional derivative of the scalar output. The
        ReLU masks from the trace are held fixed (valid a.e.), which makes the
        dotted forward/backward below exact: each weight appears once in the
        expression for v . r, biases do not appear at all.
        """
        if self.out_dim != 1:
            raise ValueError("directional derivative requires a scalar head")
        direction = np.asarray(direction, dtype=np.float64)
        coeff = np.asarray(coeff, dtype=np.float64).reshape(-1)
        # dotted forward: directional derivative of every pre-activation
        dot_act = [direction * coeff[:, None]]  # fold coefficients into r
        last = self.n_layers - 1
        for l, w in enumerate(self.weights):
            dz = dot_act[-1] @ w.T
            if l < last:
                dot_act.append(dz * (trace.pre[l] > 0.0))
            else:
                dot_act.append(dz)
        # reverse over the dotted graph, masks fixed
        grads = self.zero_grads()
        delta = np.ones_like(dot_act[-1])
        for l in range(self.n_layers - 1, -1, -1):
            grads.weights[l] += delta.T @ dot_act[l]
            if l > 0:
                delta = (delta @ self.weights[l]) * (trace.pre[l - 1] > 0.0)
        return grads


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8


class Adam:
    """Adam with bias correction over an Mlp's parameter list."""

    def __init__(self, mlp: Mlp, config: AdamConfig | None = None, name: str = "mlp"):
        self.cfg = config or AdamConfig()
        self.name = name
        self.m_w = [np.zeros_like(w) for w in mlp.weights]
        self.v_w = [np.zeros_like(w) for w in mlp.weights]
        self.m_b = [np.zeros_like(b) for b in mlp.biases]
        self.v_b = [np.zeros_like(b) for b in mlp.biases]
        self.step_count = 0

    def step(self, mlp: Mlp, grads: MlpGrads):
        for l, g in enumerate(grads.weights):
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in {self.name}.weight[{l}]")
        for l, g in enumerate(grads.biases):
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in {self.name}.bias[{l}]")
        self.step_count += 1
        t = self.step_count
        c = self.cfg
        corr1 = 1.0 - c.beta1**t
        corr2 = 1.0 - c.beta2**t
        for params, grads_l, ms, vs in (
            (mlp.weights, grads.weights, self.m_w, self.v_w),
            (mlp.biases, grads.biases, self.m_b, self.v_b),
        ):
            for p, g, m, v in zip(params, grads_l, ms, vs):
                m *= c.beta1
                m += (1.0 - c.beta1) * g
                v *= c.beta2
                v += (1.0 - c.beta2) * g * g
                p -= c.lr * (m / corr1) / (np.sqrt(v / corr2) + c.eps)


class SparseRowAdam:
    """Adam over a growable (n, h) pool, stepping only touched rows.

    Each row keeps its own step counter so bias correction matches a dense
    Adam that only ever saw that row's gradients.
    """

    def __init__(self, config: AdamConfig | None = None, name: str = "features"):
        self.cfg = config or AdamConfig()
        self.name = name
        self.m = np.empty((0, 0))
        self.v = np.empty((0, 0))
        self.t = np.empty(0, dtype=np.int64)

    def _ensure(self, pool: np.ndarray):
        n, h = pool.shape
        if self.m.shape[1] != h:
            self.m = np.zeros((0, h))
            self.v = np.zeros((0, h))
        if self.m.shape[0] < n:
            extra = n - self.m.shape[0]
            self.m = np.concatenate([self.m, np.zeros((extra, h))], axis=0)
            self.v = np.concatenate([self.v, np.zeros((extra, h))], axis=0)
            self.t = np.concatenate([self.t, np.zeros(extra, dtype=np.int64)])

    def step(self, pool: np.ndarray, rows: np.ndarray, g: np.ndarray):
        """Apply one update to `rows` of `pool`; g is row-aligned (k, h)."""
        if rows.size == 0:
            return
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {self.name}")
        self._ensure(pool)
        c = self.cfg
        self.t[rows] += 1
        t = self.t[rows][:, None].astype(np.float64)
        m = self.m[rows]
        v = self.v[rows]
        m = c.beta1 * m + (1.0 - c.beta1) * g
        v = c.beta2 * v + (1.0 - c.beta2) * g * g
        self.m[rows] = m
        self.v[rows] = v
        m_hat = m / (1.0 - c.beta1**t)
        v_hat = v / (1.0 - c.beta2**t)
        pool[rows] -= c.lr * m_hat / (np.sqrt(v_hat) + c.eps)
