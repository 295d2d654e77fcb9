"""Conditional masked autoregressive flow q(z | x_prev).

Layout in the density direction (z -> eps)::

    z -> /base_scales -> MADE_0 -> BN_0 -> MADE_1 -> ... -> BN_3 -> MADE_4 -> eps

Each MADE block is a single masked affine layer: ``mu`` and log-scale ``s``
for coordinate i are linear in the coordinates preceding i in the block's
ordering, with weights and biases emitted per sample by a hypernetwork that
reads ``x_prev``. Orderings alternate natural / reversed between blocks.
Batch-norm learnables are global (not conditioned).
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_2PI = math.log(2.0 * math.pi)


class FingerprintMismatch(ValueError):
    pass


def _mask(dim: int, reverse: bool) -> np.ndarray:
    i, j = np.indices((dim, dim))
    return (j > i if reverse else j < i).astype(np.float64)


@dataclass
class ConditionedFlow:
    """Layer parameters for a batch of conditioning states.

    ``made`` holds, per block, Tensors (w_mu, w_s, b_mu, b_s) with shapes
    (B, D*D), (B, D*D), (B, D), (B, D).
    """

    flow: "FlowModel"
    made: list[tuple[Tensor, Tensor, Tensor, Tensor]]

    @property
    def batch(self) -> int:
        return self.made[0][2].shape[0]

    def made_numpy(self, k: int):
        D = self.flow.dim_z
        w_mu, w_s, b_mu, b_s = (t.data for t in self.made[k])
        return w_mu.reshape(-1, D, D), w_s.reshape(-1, D, D), b_mu, b_s


class FlowModel:
    def __init__(
        self,
        dim_z: int,
        dim_x: int,
        *,
        n_blocks: int = 5,
        hidden: int = 64,
        base_scales=None,
        x_mean=None,
        x_scale=None,
        max_log_scale: float = 7.0,
        eps_bn: float = 1e-5,
        momentum: float = 0.1,
        fingerprint: str | None = None,
        seed: int = 0,
    ):
        if dim_z < 1 or dim_x < 1 or n_blocks < 1:
            raise ValueError("flow dimensions and block count must be positive")
        self.dim_z = dim_z
        self.dim_x = dim_x
        self.n_blocks = n_blocks
        self.hidden = hidden
        self.max_log_scale = float(max_log_scale)
        self.eps_bn = float(eps_bn)
        self.momentum = float(momentum)
        self.fingerprint = fingerprint
        self.base_scales = (
            np.ones(dim_z) if base_scales is None else np.asarray(base_scales, dtype=np.float64).copy()
        )
        self.x_mean = np.zeros(dim_x) if x_mean is None else np.asarray(x_mean, dtype=np.float64).copy()
        self.x_scale = np.ones(dim_x) if x_scale is None else np.asarray(x_scale, dtype=np.float64).copy()
        if self.base_scales.shape != (dim_z,) or np.any(self.base_scales <= 0):
            raise ValueError("base_scales must be positive with one entry per z coordinate")

        D = dim_z
        self.orderings = [np.arange(D)[::-1] if k % 2 else np.arange(D) for k in range(n_blocks)]
        self.masks = [_mask(D, bool(k % 2)) for k in range(n_blocks)]
        # u @ _rep tiles u across rows; (.) @ _row_sum sums each row of a D x D block
        self._rep = np.zeros((D, D * D))
        self._row_sum = np.zeros((D * D, D))
        for i in range(D):
            for j in range(D):
                self._rep[j, i * D + j] = 1.0
                self._row_sum[i * D + j, i] = 1.0

        rng = np.random.default_rng(seed)
        feat = hidden if hidden > 0 else dim_x
        self.params: list[Tensor] = []
        self.hyper: list[dict[str, Tensor]] = []
        for k in range(n_blocks):
            blk: dict[str, Tensor] = {}
            if hidden > 0:
                blk["in_w"] = self._param(rng.normal(0, 1 / math.sqrt(dim_x), (dim_x, hidden)), f"hyper{k}.in_w")
                blk["in_b"] = self._param(rng.normal(0, 1.0, (hidden,)), f"hyper{k}.in_b")
            # output heads start at zero: every block begins as the identity
            blk["w_mu"] = self._param(np.zeros((feat, D * D)), f"hyper{k}.w_mu")
            blk["w_s"] = self._param(np.zeros((feat, D * D)), f"hyper{k}.w_s")
            blk["b_mu"] = self._param(np.zeros((feat, D)), f"hyper{k}.b_mu")
            blk["b_s"] = self._param(np.zeros((feat, D)), f"hyper{k}.b_s")
            blk["w_mu_c"] = self._param(np.zeros(D * D), f"hyper{k}.w_mu_c")
            blk["w_s_c"] = self._param(np.zeros(D * D), f"hyper{k}.w_s_c")
            blk["b_mu_c"] = self._param(np.zeros(D), f"hyper{k}.b_mu_c")
            blk["b_s_c"] = self._param(np.zeros(D), f"hyper{k}.b_s_c")
            self.hyper.append(blk)
        self.bn: list[dict[str, Tensor]] = []
        # running_var + eps_bn == 1 exactly, so evaluation-mode BN starts as the identity
        self.bn_running_mean = [np.zeros(D) for _ in range(n_blocks - 1)]
        self.bn_running_var = [np.full(D, 1.0 - self.eps_bn) for _ in range(n_blocks - 1)]
        for k in range(n_blocks - 1):
            self.bn.append(
                {
                    "shift": self._param(np.zeros(D), f"bn{k}.shift"),
                    "log_scale": self._param(np.zeros(D), f"bn{k}.log_scale"),
                }
            )

    def _param(self, value, name) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self.params.append(t)
        return t

    def fit_input_scaling(self, X: np.ndarray) -> None:
        """Standardise hypernetwork inputs with statistics of ``X``."""
        X = np.atleast_2d(X)
        self.x_mean = X.mean(axis=0)
        sd = X.std(axis=0)
        self.x_scale = np.where(sd > 1e-12, sd, 1.0)

    # ---- conditioning --------------------------------------------------

    def condition(self, x_prev) -> ConditionedFlow:
        """Run every hypernetwork once for each row of ``x_prev``."""
        X = np.atleast_2d(np.asarray(x_prev, dtype=np.float64))
        if X.shape[1] != self.dim_x:
            raise ValueError(f"conditioning state has dimension {X.shape[1]}, expected {self.dim_x}")
        B, D = X.shape[0], self.dim_z
        xs = Tensor((X - self.x_mean) / self.x_scale)
        made = []
        for k, blk in enumerate(self.hyper):
            if self.hidden > 0:
                pre = xs @ blk["in_w"] + ad.broadcast(blk["in_b"], (B, self.hidden))
                feat = ad.tanh(pre)
            else:
                feat = xs
            flat_mask = self.masks[k].ravel()
            colmask = np.broadcast_to(flat_mask, blk["w_mu"].shape)
            w_mu = ad.masked_matmul(feat, blk["w_mu"], colmask) + ad.broadcast(
                blk["w_mu_c"] * flat_mask, (B, D * D)
            )
            w_s = ad.masked_matmul(feat, blk["w_s"], colmask) + ad.broadcast(
                blk["w_s_c"] * flat_mask, (B, D * D)
            )
            b_mu = feat @ blk["b_mu"] + ad.broadcast(blk["b_mu_c"], (B, D))
            b_s = feat @ blk["b_s"] + ad.broadcast(blk["b_s_c"], (B, D))
            made.append((w_mu, w_s, b_mu, b_s))
        return ConditionedFlow(self, made)

    # ---- density direction ---------------------------------------------

    def _squash(self, s_raw: Tensor) -> Tensor:
        c = self.max_log_scale
        return ad.tanh(s_raw * (1.0 / c)) * c

    def made_params(self, cond: ConditionedFlow, k: int, u: Tensor) -> tuple[Tensor, Tensor]:
        """Shift and (squashed) log-scale of block ``k`` at input ``u``."""
        w_mu, w_s, b_mu, b_s = cond.made[k]
        u_rep = u @ Tensor(self._rep)
        row_sum = Tensor(self._row_sum)
        mu = ad.multiply(w_mu, u_rep) @ row_sum + b_mu
        s = self._squash(ad.multiply(w_s, u_rep) @ row_sum + b_s)
        return mu, s

    def _batchnorm(self, k: int, u: Tensor, training: bool) -> tuple[Tensor, Tensor]:
        B, D = u.shape
        p = self.bn[k]
        if training:
            m = ad.mean(u, axis=0)
            c = u - ad.broadcast(m, (B, D))
            v = ad.mean(ad.square(c), axis=0)
            if ad._grad_enabled:
                mom = self.momentum
                self.bn_running_mean[k] = (1 - mom) * self.bn_running_mean[k] + mom * m.data
                self.bn_running_var[k] = (1 - mom) * self.bn_running_var[k] + mom * v.data
        else:
            m = Tensor(self.bn_running_mean[k])
            c = u - ad.broadcast(m, (B, D))
            v = Tensor(self.bn_running_var[k])
        log_inv_sd = ad.log(v + self.eps_bn) * -0.5
        gain = ad.exp(log_inv_sd + p["log_scale"])
        out = ad.multiply(c, ad.broadcast(gain, (B, D))) + ad.broadcast(p["shift"], (B, D))
        logdet = ad.broadcast(ad.sum(log_inv_sd + p["log_scale"]), (B,))
        return out, logdet

    def forward_with_logdet(self, z, x_prev=None, *, cond: ConditionedFlow | None = None, training: bool = False):
        """Map ``z`` to base space; returns (eps, per-sample log|det J|) as Tensors."""
        Z = z.data if isinstance(z, Tensor) else np.atleast_2d(np.asarray(z, dtype=np.float64))
        if Z.shape[1] != self.dim_z:
            raise ValueError(f"perturbation has dimension {Z.shape[1]}, expected {self.dim_z}")
        if cond is None:
            cond = self.condition(x_prev)
        B = Z.shape[0]
        u = Tensor(Z / self.base_scales)
        logdet = Tensor(np.full(B, -np.sum(np.log(self.base_scales))))
        for k in range(self.n_blocks):
            if k > 0:
                u, ld = self._batchnorm(k - 1, u, training)
                logdet = logdet + ld
            mu, s = self.made_params(cond, k, u)
            u = ad.multiply(u - mu, ad.exp(-s))
            logdet = logdet - ad.sum(s, axis=1)
        return u, logdet

    def log_prob(self, z, x_prev=None, *, cond=None, training: bool = False) -> Tensor:
        eps, logdet = self.forward_with_logdet(z, x_prev, cond=cond, training=training)
        base = ad.sum(ad.square(eps), axis=1) * -0.5 - 0.5 * self.dim_z * LOG_2PI
        return base + logdet

    def log_density(self, z, x_prev) -> np.ndarray:
        """Evaluation-mode log q(z | x_prev), one value per row."""
        with ad.no_grad():
            return self.log_prob(z, x_prev, training=False).data.copy()

    # ---- sampling direction ----------------------------------------------

    def inverse(self, eps, x_prev=None, *, cond: ConditionedFlow | None = None) -> np.ndarray:
        """Map base-space points back to perturbations (evaluation mode)."""
        E = np.atleast_2d(np.asarray(eps, dtype=np.float64))
        if cond is None:
            with ad.no_grad():
                cond = self.condition(x_prev)
        c = self.max_log_scale
        h = E.copy()
        for k in reversed(range(self.n_blocks)):
            w_mu, w_s, b_mu, b_s = cond.made_numpy(k)
            u = np.zeros_like(h)
            for i in self.orderings[k]:
                mu_i = np.einsum("bj,bj->b", w_mu[:, i, :], u) + b_mu[:, i]
                s_i = c * np.tanh((np.einsum("bj,bj->b", w_s[:, i, :], u) + b_s[:, i]) / c)
                u[:, i] = h[:, i] * np.exp(s_i) + mu_i
            h = u
            if k > 0:
                p = self.bn[k - 1]
                sd = np.sqrt(self.bn_running_var[k - 1] + self.eps_bn)
                h = (h - p["shift"].data) * np.exp(-p["log_scale"].data) * sd + self.bn_running_mean[k - 1]
        return h * self.base_scales

    def sample(self, x_prev, rng: np.random.Generator) -> np.ndarray:
        X = np.atleast_2d(x_prev)
        eps = rng.standard_normal((X.shape[0], self.dim_z))
        return self.inverse(eps, X)

    # ---- persistence -----------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {p.name: p.data.copy() for p in self.params}
        for k in range(self.n_blocks - 1):
            out[f"bn{k}.running_mean"] = self.bn_running_mean[k].copy()
            out[f"bn{k}.running_var"] = self.bn_running_var[k].copy()
        out["base_scales"] = self.base_scales.copy()
        out["x_mean"] = self.x_mean.copy()
        out["x_scale"] = self.x_scale.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.params:
            if state[p.name].shape != p.shape:
                raise ValueError(f"shape mismatch for {p.name}")
            p.data = np.array(state[p.name], dtype=np.float64)
        for k in range(self.n_blocks - 1):
            self.bn_running_mean[k] = np.array(state[f"bn{k}.running_mean"], dtype=np.float64)
            self.bn_running_var[k] = np.array(state[f"bn{k}.running_var"], dtype=np.float64)
        self.base_scales = np.array(state["base_scales"], dtype=np.float64)
        self.x_mean = np.array(state["x_mean"], dtype=np.float64)
        self.x_scale = np.array(state["x_scale"], dtype=np.float64)

    def meta(self) -> dict:
        return {
            "format": "brittlesim-flow/1",
            "dim_z": self.dim_z,
            "dim_x": self.dim_x,
            "n_blocks": self.n_blocks,
            "hidden": self.hidden,
            "max_log_scale": self.max_log_scale,
            "eps_bn": self.eps_bn,
            "momentum": self.momentum,
            "orderings": [o.tolist() for o in self.orderings],
            "fingerprint": self.fingerprint,
        }

    def save(self, path) -> None:
        """Write a single ``.npz`` holding metadata (JSON) and every array."""
        arrays = self.state_dict()
        arrays["__meta__"] = np.frombuffer(json.dumps(self.meta()).encode(), dtype=np.uint8)
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path, expected_fingerprint: str | None = None) -> "FlowModel":
        with np.load(path) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())
            state = {k: data[k] for k in data.files if k != "__meta__"}
        if expected_fingerprint is not None and meta["fingerprint"] != expected_fingerprint:
            raise FingerprintMismatch(
                f"model trained for simulator {meta['fingerprint']}, not {expected_fingerprint}"
            )
        flow = cls(
            meta["dim_z"],
            meta["dim_x"],
            n_blocks=meta["n_blocks"],
            hidden=meta["hidden"],
            max_log_scale=meta["max_log_scale"],
            eps_bn=meta["eps_bn"],
            momentum=meta["momentum"],
            fingerprint=meta["fingerprint"],
        )
        flow.load_state_dict(state)
        return flow

    def copy(self) -> "FlowModel":
        new = FlowModel(
            self.dim_z, self.dim_x, n_blocks=self.n_blocks, hidden=self.hidden,
            max_log_scale=self.max_log_scale, eps_bn=self.eps_bn, momentum=self.momentum,
            fingerprint=self.fingerprint,
        )
        new.load_state_dict(self.state_dict())
        return new


def flow_for(sim, *, hidden: int = 64, n_blocks: int = 5, seed: int = 0, states=None) -> FlowModel:
    """A flow matching ``sim``'s baseline Gaussian at initialisation."""
    flow = FlowModel(
        sim.perturbation_dim,
        sim.state_dim,
        n_blocks=n_blocks,
        hidden=hidden,
        base_scales=sim.baseline_scales(),
        fingerprint=sim.fingerprint(),
        seed=seed,
    )
    if states is not None:
        flow.fit_input_scaling(states)
    return flow
