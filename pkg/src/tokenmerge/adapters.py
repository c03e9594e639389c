"""Low-rank adapters attached to a frozen backbone.

Every adapter is a down/up projection pair with a scalar scale and no
biases.  The up projection starts at zero, so a freshly built adapter adds
exactly nothing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node

SITES = ("attn_q", "attn_v", "ffn_parallel", "key_refine")
INIT_STD = 0.02


@dataclass
class AdapterWeights:
    w_down: Node
    w_up: Node
    scale: float = 1.0
    activation: str = "none"
    site: str = "attn_q"

    def __post_init__(self):
        if self.site not in SITES:
            raise ValueError(f"unknown adapter site {self.site!r}")
        if self.activation not in ("none", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        d_in, h = self.w_down.shape
        if self.w_up.shape != (h, d_in):
            raise ValueError(f"w_up shape {self.w_up.shape} does not match w_down {self.w_down.shape}")
        if h >= d_in:
            raise ValueError(f"adapter rank {h} must be below input dim {d_in}")

    @property
    def d_in(self) -> int:
        return self.w_down.shape[0]

    @property
    def hidden(self) -> int:
        return self.w_down.shape[1]

    @property
    def num_params(self) -> int:
        return self.w_down.value.size + self.w_up.value.size

    def nodes(self) -> list[Node]:
        return [self.w_down, self.w_up]


def init_adapter(rng, d_in: int, hidden: int, site: str, scale: float = 1.0, dtype=np.float32) -> AdapterWeights:
    activation = "none" if site in ("attn_q", "attn_v") else "relu"
    w_down = rng.normal(0.0, INIT_STD, size=(d_in, hidden)).astype(dtype)
    w_up = np.zeros((hidden, d_in), dtype=dtype)
    return AdapterWeights(
        ad.parameter(w_down, name=f"{site}.w_down"),
        ad.parameter(w_up, name=f"{site}.w_up"),
        scale=scale,
        activation=activation,
        site=site,
    )


def _require_site(a: AdapterWeights, allowed, op: str):
    if a.site not in allowed:
        raise ValueError(f"{op} cannot use an adapter for site {a.site!r}")


def lora_delta(x, a: AdapterWeights) -> Node:
    """``s * x @ W_down @ W_up``, to be added to a frozen Q or V projection."""
    _require_site(a, ("attn_q", "attn_v"), "lora_delta")
    if a.activation != "none":
        raise ValueError("LoRA adapters are linear")
    return ((x @ a.w_down) @ a.w_up) * a.scale


def adaptformer_branch(x, a: AdapterWeights) -> Node:
    """``s * relu(x @ W_down) @ W_up``, run alongside the FFN."""
    _require_site(a, ("ffn_parallel",), "adaptformer_branch")
    return (ad.relu(x @ a.w_down) @ a.w_up) * a.scale


def refine_keys(k, a: AdapterWeights) -> Node:
    """``k + s * relu(k @ W_down) @ W_up``.

    Callers detach ``k`` from the backbone first so the matching loss only
    trains this adapter.
    """
    _require_site(a, ("key_refine",), "refine_keys")
    return k + (ad.relu(k @ a.w_down) @ a.w_up) * a.scale


def trainable_partition(model) -> tuple[dict[str, Node], dict[str, Node]]:
    """Split ``model.params`` into (trainable, frozen) by name.

    Adapters and the classifier head train; everything else is backbone.
    """
    trainable, frozen = {}, {}
    for name, node in model.params.items():
        if name.startswith(("adapter.", "head.")):
            trainable[name] = node
        else:
            frozen[name] = node
    return trainable, frozen


def count_params(nodes) -> int:
    return int(sum(n.value.size for n in nodes))
