"""First-order optimizers and the multi-step learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class OptimState:
    kind: str = "sgd_momentum"
    learning_rate: float = 0.01
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    milestones: list[int] = field(default_factory=list)
    decay: float = 0.1
    step_count: int = 0
    buffers: dict = field(default_factory=dict)

    def lr_at(self, epoch: int) -> float:
        """Base lr times ``decay`` for every milestone already reached."""
        passed = sum(1 for m in self.milestones if m <= epoch)
        return self.learning_rate * self.decay ** passed


class Optimizer:
    """Updates ``params`` in place from their ``.grad``.

    ``kind`` is ``"sgd_momentum"`` or ``"adam"``; call :meth:`set_epoch` at the
    start of each epoch so the milestone schedule takes effect.
    """

    def __init__(self, params: list[Tensor], kind: str = "sgd_momentum", lr: float = 0.01,
                 momentum: float = 0.9, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, milestones=(), decay: float = 0.1):
        if kind not in ("sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer kind {kind!r}")
        self.params = [p for p in params if p.requires_grad]
        self.state = OptimState(kind=kind, learning_rate=lr, momentum=momentum,
                                betas=tuple(betas), eps=eps, weight_decay=weight_decay,
                                milestones=list(milestones), decay=decay)
        self.lr = lr

    def set_epoch(self, epoch: int) -> float:
        self.lr = self.state.lr_at(epoch)
        return self.lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        st = self.state
        st.step_count += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if st.weight_decay:
                g = g + st.weight_decay * p.data
            if st.kind == "sgd_momentum":
                buf = st.buffers.get(i)
                buf = g.copy() if buf is None else st.momentum * buf + g
                st.buffers[i] = buf
                p.data -= self.lr * buf
            else:
                b1, b2 = st.betas
                m, v = st.buffers.get(i, (np.zeros_like(p.data), np.zeros_like(p.data)))
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                st.buffers[i] = (m, v)
                mhat = m / (1 - b1 ** st.step_count)
                vhat = v / (1 - b2 ** st.step_count)
                p.data -= self.lr * mhat / (np.sqrt(vhat) + st.eps)
