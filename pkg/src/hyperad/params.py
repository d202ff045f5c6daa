"""All learnable tensors, their initialization, and flat-vector plumbing.

Blocks, in checkpoint order: mapper weight and bias, the L reasoning
layer matrices, the node anomaly head, then the image head (bin
centers, bandwidth, MLP).
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import ValidationError
from .inference import ImageHead
from .reasoning import ReasoningParams
from .semantic import Mapper


class ModelParams:
    def __init__(self, blocks: dict[str, Tensor]):
        self._blocks = blocks

    @staticmethod
    def init(d: int, L: int, B: int = 16, bandwidth: float = 0.05,
             rng: np.random.Generator | None = None) -> "ModelParams":
        """Near-no-op start: zero mapper and node head, identity-plus-noise
        layers, expectation-readout image head."""
        if d < 1 or L < 1 or B < 1:
            raise ValidationError("d, L, and B must be positive")
        rng = rng or np.random.default_rng(0)
        blocks: dict[str, Tensor] = {
            "mapper_weight": Tensor(np.zeros((d, d)), requires_grad=True),
            "mapper_bias": Tensor(np.zeros(d), requires_grad=True),
        }
        for i in range(L):
            noise = rng.uniform(-0.01, 0.01, size=(d, d))
            blocks[f"layer_{i}"] = Tensor(np.eye(d) + noise, requires_grad=True)
        blocks["head_weight"] = Tensor(np.zeros(d), requires_grad=True)
        blocks["head_bias"] = Tensor(np.zeros(()), requires_grad=True)
        centers = np.linspace(0.0, 1.0, B) if B > 1 else np.array([0.5])
        blocks["bin_centers"] = Tensor(centers, requires_grad=True)
        blocks["bandwidth"] = Tensor(np.array(float(bandwidth)), requires_grad=True)
        blocks["mlp_w1"] = Tensor(np.eye(B), requires_grad=True)
        blocks["mlp_b1"] = Tensor(np.zeros(B), requires_grad=True)
        blocks["mlp_w2"] = Tensor(2.0 * (centers - 0.5), requires_grad=True)
        blocks["mlp_b2"] = Tensor(np.zeros(()), requires_grad=True)
        return ModelParams(blocks)

    # Introspection -----------------------------------------------------
    @property
    def d(self) -> int:
        return self._blocks["mapper_weight"].data.shape[0]

    @property
    def n_layers(self) -> int:
        return sum(1 for name in self._blocks if name.startswith("layer_"))

    @property
    def n_bins(self) -> int:
        return self._blocks["bin_centers"].data.size

    def blocks(self) -> dict[str, Tensor]:
        return dict(self._blocks)

    def block_names(self) -> list[str]:
        return list(self._blocks.keys())

    def __getitem__(self, name: str) -> Tensor:
        return self._blocks[name]

    # Views consumed by the pipeline ------------------------------------
    def mapper(self) -> Mapper:
        return Mapper(self._blocks["mapper_weight"], self._blocks["mapper_bias"])

    def reasoning(self, activation: str = "leaky_relu") -> ReasoningParams:
        layers = [self._blocks[f"layer_{i}"] for i in range(self.n_layers)]
        return ReasoningParams(layers, self._blocks["head_weight"],
                               self._blocks["head_bias"], activation)

    def image_head(self) -> ImageHead:
        return ImageHead(self._blocks["bin_centers"], self._blocks["bandwidth"],
                         self._blocks["mlp_w1"], self._blocks["mlp_b1"],
                         self._blocks["mlp_w2"], self._blocks["mlp_b2"])

    # Optimizer plumbing -------------------------------------------------
    def zero_grads(self) -> None:
        for t in self._blocks.values():
            t.zero_grad()

    def sgd_step(self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0,
                 velocity: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
        velocity = velocity if velocity is not None else {}
        for name, t in self._blocks.items():
            grad = t.grad if t.grad is not None else np.zeros_like(t.data)
            if weight_decay:
                grad = grad + weight_decay * t.data
            if momentum:
                vel = velocity.get(name, np.zeros_like(t.data))
                vel = momentum * vel + grad
                velocity[name] = vel
                grad = vel
            t.data = t.data - lr * grad
        return velocity

    # Flat-vector plumbing for checkpointing and gradient checks ---------
    def flatten(self) -> np.ndarray:
        return np.concatenate([self._blocks[n].data.reshape(-1) for n in self._blocks])

    def load_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        offset = 0
        for name, t in self._blocks.items():
            size = t.data.size
            if offset + size > vec.size:
                raise ValidationError("flat vector is too short for the parameter set")
            t.data = vec[offset:offset + size].reshape(t.data.shape).copy()
            offset += size
        if offset != vec.size:
            raise ValidationError("flat vector has trailing entries")

    def block_slices(self) -> dict[str, slice]:
        slices = {}
        offset = 0
        for name, t in self._blocks.items():
            slices[name] = slice(offset, offset + t.data.size)
            offset += t.data.size
        return slices

    def clone(self) -> "ModelParams":
        return ModelParams({name: Tensor(t.data.copy(), requires_grad=True)
                            for name, t in self._blocks.items()})
