"""Twin critic for the behavior-regularizer reward."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .env import ACTION_DIM, OBS_DIM
from .fb import OBS_SCALE
from .nn import DenseNet, TrainingError, mlp

if TYPE_CHECKING:
    from .replay import FBBatch


@dataclass
class RegCritic:
    nets: list[DenseNet]
    targets: list[DenseNet]
    tau: float = 0.005

    @classmethod
    def create(
        cls, rng: np.random.Generator, hidden: Sequence[int] = (256, 256), n_nets: int = 2,
        tau: float = 0.005,
    ) -> "RegCritic":
        nets = [mlp(OBS_DIM + ACTION_DIM, hidden, 1, rng) for _ in range(n_nets)]
        return cls(nets, [n.copy() for n in nets], tau)

    def astype(self, dtype) -> "RegCritic":
        return RegCritic(
            [n.astype(dtype) for n in self.nets], [n.astype(dtype) for n in self.targets], self.tau
        )

    @property
    def dtype(self):
        return self.nets[0].flat.dtype

    def named_nets(self) -> dict[str, DenseNet]:
        out = {f"qreg{i}": n for i, n in enumerate(self.nets)}
        out.update({f"target_qreg{i}": n for i, n in enumerate(self.targets)})
        return out

    def _x(self, obs, action) -> np.ndarray:
        return np.concatenate(
            [(obs * OBS_SCALE).astype(self.dtype), np.asarray(action, dtype=self.dtype)], axis=-1
        )

    def twin_values(self, obs, action, target: bool = False) -> np.ndarray:
        nets = self.targets if target else self.nets
        x = self._x(obs, action)
        return np.stack([n.forward(x)[..., 0] for n in nets])

    def q_reg(self, obs, action, target: bool = False) -> np.ndarray:
        return self.twin_values(obs, action, target).min(axis=0)

    def value_and_action_grad(self, obs, action) -> tuple[np.ndarray, np.ndarray]:
        """Twin-min value and its gradient w.r.t. the action (per row)."""
        x = self._x(obs, action)
        outs = [n.forward_cached(x) for n in self.nets]
        qs = np.stack([q[:, 0] for q, _ in outs])
        pick = np.argmin(qs, axis=0)
        g_a = np.zeros((len(x), ACTION_DIM), dtype=self.dtype)
        for i, (net, (_, cache)) in enumerate(zip(self.nets, outs)):
            sel = (pick == i).astype(self.dtype)[:, None]
            if not sel.any():
                continue
            _, g_x = net.backward(cache, sel, need_param_grad=False)
            g_a += g_x[:, OBS_DIM:]
        return qs[pick, np.arange(len(x))], g_a


def reg_critic_loss(
    critic: RegCritic, batch: "FBBatch", next_action: np.ndarray, gamma: float = 0.98
) -> tuple[float, dict[str, np.ndarray]]:
    """TD loss ``(Q_k(s,a) - (r_reg + gamma * min_k Qbar_k(s', a')))^2``, averaged over twins."""
    n = len(batch)
    target = batch.reg_reward.astype(np.float64) + gamma * critic.q_reg(
        batch.next_obs, next_action, target=True
    )
    target = target.astype(critic.dtype)
    x = critic._x(batch.obs, batch.action)
    k = len(critic.nets)
    loss = 0.0
    grads = {}
    for i, net in enumerate(critic.nets):
        q, cache = net.forward_cached(x)
        resid = q[:, 0] - target
        loss += float(np.mean(np.square(resid, dtype=np.float64))) / k
        g = (resid * (2.0 / (k * n)))[:, None]
        grads[f"qreg{i}"] = net.backward(cache, g.astype(critic.dtype), need_input_grad=False)[0]
    if not np.isfinite(loss):
        raise TrainingError("non-finite regularization critic loss")
    return loss, grads
