"""Adam with independent parameter groups."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError, ParamTensor

# learning rates used for image fitting (one group) and 3D fields (two groups)
IMAGE_LR = 5e-4
BANK_LR_3D = 1e-2
MLP_LR_3D = 5e-4


@dataclass
class ParamGroup:
    params: list[ParamTensor]
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    name: str = ""
    m: list[np.ndarray] = field(init=False)
    v: list[np.ndarray] = field(init=False)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]


def adam_step(groups: list[ParamGroup], t: int) -> None:
    """One bias-corrected Adam update at step ``t`` (1-based)."""
    if t < 1:
        raise ContractError(f"Adam step count must be >= 1, got {t}")
    for group in groups:
        b1, b2 = group.beta1, group.beta2
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for p, m, v in zip(group.params, group.m, group.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            m_hat = m / c1
            v_hat = v / c2
            p.values -= (group.lr * m_hat / (np.sqrt(v_hat) + group.eps)).astype(p.values.dtype, copy=False)


class Adam:
    """Stateful wrapper that tracks the step counter."""

    def __init__(self, groups: list[ParamGroup]):
        self.groups = groups
        self.t = 0

    def params(self) -> list[ParamTensor]:
        return [p for g in self.groups for p in g.params]

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        adam_step(self.groups, self.t)


def make_task_groups(model, task: str, bank_lr: float | None = None, mlp_lr: float | None = None,
                     **adam_kw) -> list[ParamGroup]:
    """Parameter groups with the reference learning rates.

    ``task == "image"``: a single group at 5e-4 for features and MLP.
    Any 3D task (``"sdf"``, ``"nerf"``): features at 1e-2, MLP at 5e-4.
    """
    banks = model.bank_params()
    mlp = model.mlp_params()
    if task == "image":
        lr = mlp_lr if mlp_lr is not None else IMAGE_LR
        return [ParamGroup(banks + mlp, lr, name="all", **adam_kw)]
    groups = []
    if banks:
        groups.append(ParamGroup(banks, bank_lr if bank_lr is not None else BANK_LR_3D, name="bank", **adam_kw))
    groups.append(ParamGroup(mlp, mlp_lr if mlp_lr is not None else MLP_LR_3D, name="mlp", **adam_kw))
    return groups
