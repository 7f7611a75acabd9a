from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


class Adam:
    """Bias-corrected Adam over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, max_norm: float | None = None):
        self.params = params
        self.max_norm = max_norm
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name, p in params.items():
            self.state.first_moment[name] = np.zeros_like(p.data)
            self.state.second_moment[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in self.params.values()
                                 if p.grad is not None)))

    def step(self) -> None:
        st = self.state
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
            grads[name] = g
        if self.max_norm is not None:
            norm = self.grad_norm()
            if norm > self.max_norm:
                grads = {k: g * (self.max_norm / norm) for k, g in grads.items()}
        st.step_count += 1
        bc1 = 1.0 - st.beta1 ** st.step_count
        bc2 = 1.0 - st.beta2 ** st.step_count
        for name, p in self.params.items():
            g = grads[name]
            m = st.first_moment[name]
            v = st.second_moment[name]
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * g * g
            p.data = p.data - st.lr * (m / bc1) / (np.sqrt(v / bc2) + st.eps)

    def state_dict(self) -> dict:
        st = self.state
        return {
            "lr": st.lr, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps,
            "step_count": st.step_count,
            "first_moment": st.first_moment,
            "second_moment": st.second_moment,
        }

    def load_state_dict(self, d: dict) -> None:
        st = self.state
        st.lr, st.beta1, st.beta2, st.eps = d["lr"], d["beta1"], d["beta2"], d["eps"]
        st.step_count = int(d["step_count"])
        for name in self.params:
            st.first_moment[name] = np.array(d["first_moment"][name], dtype=np.float64)
            st.second_moment[name] = np.array(d["second_moment"][name], dtype=np.float64)
