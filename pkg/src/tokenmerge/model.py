"""A small pre-norm Vision Transformer with adapter hooks and one merge site."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import tensor as T
from .adapters import AdapterWeights, adaptformer_branch, init_adapter, lora_delta, trainable_partition
from .autodiff import Node
from .merging import MergeOutcome, bdm_merge, bsm_merge, pool_merge
from .state import TokenState

MERGE_METHODS = ("none", "bdm", "bsm", "bsm_per_layer", "avg_pool", "max_pool")
ADAPTERS = ("none", "lora", "adaptformer")


@dataclass
class VitConfig:
    depth: int = 4
    dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    grid: tuple = (8, 8)
    patch: int = 4
    channels: int = 1
    num_classes: int = 4
    use_cls: bool = True
    merge_method: str = "none"
    merge_layer: int | None = None
    merge_r: int = 8
    split_pattern: str = "stripe"
    adapter: str = "none"
    adapter_hidden: int = 8
    adapter_scale: float = 1.0
    refine_hidden: int = 8
    refine_scale: float = 1.0
    proportional_attn: bool = False
    stop_grad: bool = True
    size_grad: bool = True
    cosine: bool = False
    backbone_seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.merge_method not in MERGE_METHODS:
            raise ValueError(f"unknown merge method {self.merge_method!r}")
        if self.adapter not in ADAPTERS:
            raise ValueError(f"unknown adapter {self.adapter!r}")
        if self.merge_method in ("none", "bsm_per_layer"):
            self.merge_layer = None if self.merge_method == "none" else self.merge_layer
        elif self.merge_layer is None:
            self.merge_layer = self.depth // 2
        if self.merge_layer is not None and not 0 <= self.merge_layer < self.depth:
            raise ValueError(f"merge layer {self.merge_layer} outside [0, {self.depth})")
        if self.adapter != "none" and not 0 < self.adapter_hidden < self.dim:
            raise ValueError(f"adapter width {self.adapter_hidden} must be in (0, {self.dim})")
        if self.merge_method == "bdm" and self.refine_hidden >= self.head_dim:
            raise ValueError(f"refine width {self.refine_hidden} must be below the key dim {self.head_dim}")
        h, w = self.grid
        if self.merge_method == "bdm" and (h * w) % 2:
            raise ValueError(f"checkerboard matching needs an even patch count, grid is {h}x{w}")
        if self.merge_method == "bsm" and self.split_pattern == "checkerboard" and (h * w) % 2:
            raise ValueError(f"checkerboard split needs an even patch count, grid is {h}x{w}")
        if self.merge_method in ("avg_pool", "max_pool") and w % 2:
            raise ValueError(f"pooling needs an even grid width, got {w}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def num_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def num_tokens(self) -> int:
        return self.num_patches + int(self.use_cls)

    @property
    def hidden_dim(self) -> int:
        return int(round(self.dim * self.mlp_ratio))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "VitConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _merged_count(cfg: VitConfig, n: int) -> int:
    off = int(cfg.use_cls)
    patches = n - off
    if cfg.merge_method in ("bdm", "bsm"):
        return n - (patches + 1) // 2
    if cfg.merge_method in ("avg_pool", "max_pool"):
        return off + patches // 2
    raise AssertionError(cfg.merge_method)


def token_schedule(cfg: VitConfig) -> list[tuple[int, int]]:
    """(attention tokens, FFN tokens) for each layer."""
    n = cfg.num_tokens
    sched = []
    for layer in range(cfg.depth):
        n_attn = n
        if cfg.merge_method == "bsm_per_layer":
            n_a = (n - int(cfg.use_cls) + 1) // 2
            n -= min(cfg.merge_r, n_a)
        elif cfg.merge_method != "none" and layer == cfg.merge_layer:
            n = _merged_count(cfg, n)
        sched.append((n_attn, n))
    return sched


class VitModel:
    """Parameters live in ``self.params`` (name -> Node); adapters also in ``self.adapters``."""

    def __init__(self, cfg: VitConfig, head_seed: int | None = None):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        self.params: dict[str, Node] = {}
        self.adapters: dict[str, AdapterWeights] = {}
        rng = T.make_rng(cfg.backbone_seed)
        self._init_backbone(rng)
        # adapters and head draw from their own stream so the backbone does not
        # depend on which adapters are configured
        arng = T.make_rng(cfg.backbone_seed + 1 if head_seed is None else head_seed)
        self._init_adapters(arng)
        self._init_head(arng)
        self.freeze_backbone()

    # ------------------------------------------------------------- init

    def _param(self, name, value):
        self.params[name] = ad.parameter(np.asarray(value, dtype=self.dtype), name=name)

    def _linear(self, rng, name, fan_in, fan_out):
        self._param(f"{name}.w", rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out)))
        self._param(f"{name}.b", np.zeros(fan_out))

    def _norm(self, name, d):
        self._param(f"{name}.w", np.ones(d))
        self._param(f"{name}.b", np.zeros(d))

    def _init_backbone(self, rng):
        c = self.cfg
        d = c.dim
        self._linear(rng, "embed", c.channels * c.patch * c.patch, d)
        if c.use_cls:
            self._param("cls", rng.normal(0.0, 0.02, (1, 1, d)))
        self._param("pos", rng.normal(0.0, 0.02, (1, c.num_tokens, d)))
        for l in range(c.depth):
            p = f"blocks.{l}"
            self._norm(f"{p}.ln1", d)
            for proj in ("q", "k", "v", "proj"):
                self._linear(rng, f"{p}.attn.{proj}", d, d)
            self._norm(f"{p}.ln2", d)
            self._linear(rng, f"{p}.mlp.fc1", d, c.hidden_dim)
            self._linear(rng, f"{p}.mlp.fc2", c.hidden_dim, d)
        self._norm("norm", d)

    def _add_adapter(self, rng, key, d_in, hidden, site, scale):
        a = init_adapter(rng, d_in, hidden, site, scale, dtype=self.dtype)
        a.w_down.name = f"adapter.{key}.w_down"
        a.w_up.name = f"adapter.{key}.w_up"
        self.adapters[key] = a
        self.params[a.w_down.name] = a.w_down
        self.params[a.w_up.name] = a.w_up

    def _init_adapters(self, rng):
        c = self.cfg
        for l in range(c.depth):
            if c.adapter == "lora":
                self._add_adapter(rng, f"{l}.q", c.dim, c.adapter_hidden, "attn_q", c.adapter_scale)
                self._add_adapter(rng, f"{l}.v", c.dim, c.adapter_hidden, "attn_v", c.adapter_scale)
            elif c.adapter == "adaptformer":
                self._add_adapter(rng, f"{l}.ffn", c.dim, c.adapter_hidden, "ffn_parallel", c.adapter_scale)
        if c.merge_method == "bdm" and c.refine_hidden > 0:
            self._add_adapter(rng, "refine", c.head_dim, c.refine_hidden, "key_refine", c.refine_scale)

    def _init_head(self, rng):
        c = self.cfg
        self._param("head.w", np.zeros((c.dim, c.num_classes)))
        self._param("head.b", np.zeros(c.num_classes))

    # --------------------------------------------------------- partition

    def partition(self):
        return trainable_partition(self)

    def freeze_backbone(self):
        trainable, frozen = self.partition()
        for n in trainable.values():
            n.requires_grad = True
        for n in frozen.values():
            n.requires_grad = False

    def unfreeze_all(self):
        for n in self.params.values():
            n.requires_grad = True

    def trainable_params(self) -> dict[str, Node]:
        return self.partition()[0]

    def frozen_checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, node in sorted(self.partition()[1].items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(node.value).tobytes())
        return h.hexdigest()

    # ----------------------------------------------------------- forward

    def p(self, name) -> Node:
        return self.params[name]

    def _dense(self, x, name):
        return x @ self.p(f"{name}.w") + self.p(f"{name}.b")

    def patch_embed(self, images) -> TokenState:
        c = self.cfg
        images = np.asarray(images.value if isinstance(images, Node) else images, dtype=self.dtype)
        if images.ndim != 4:
            raise ValueError(f"images must be [B, C, H, W], got shape {images.shape}")
        b, ch, hp, wp = images.shape
        if ch != c.channels:
            raise ValueError(f"expected {c.channels} channels, got {ch}")
        if hp % c.patch or wp % c.patch:
            raise ValueError(f"image {hp}x{wp} not divisible by patch size {c.patch}")
        h, w = hp // c.patch, wp // c.patch
        if (h, w) != c.grid:
            raise ValueError(f"image gives grid {h}x{w}, model expects {c.grid[0]}x{c.grid[1]}")
        patches = images.reshape(b, ch, h, c.patch, w, c.patch).transpose(0, 2, 4, 1, 3, 5)
        patches = patches.reshape(b, h * w, ch * c.patch * c.patch)
        x = self._dense(Node(patches), "embed")
        if c.use_cls:
            cls = self.p("cls") + np.zeros((b, 1, c.dim), dtype=self.dtype)
            x = ad.concat([cls, x], axis=1)
        x = x + self.p("pos")
        return TokenState.fresh(x, c.grid, c.use_cls)

    def mhsa_forward(self, l: int, state: TokenState):
        """Pre-norm self-attention with residual; returns (tokens, head-averaged keys)."""
        c = self.cfg
        p = f"blocks.{l}"
        x = state.tokens
        b, n, d = x.shape
        if d != c.dim:
            raise ValueError(f"token dim {d} != model dim {c.dim}")
        xn = ad.layer_norm(x, self.p(f"{p}.ln1.w"), self.p(f"{p}.ln1.b"))
        q = self._dense(xn, f"{p}.attn.q")
        k = self._dense(xn, f"{p}.attn.k")
        v = self._dense(xn, f"{p}.attn.v")
        if f"{l}.q" in self.adapters:
            q = q + lora_delta(xn, self.adapters[f"{l}.q"])
            v = v + lora_delta(xn, self.adapters[f"{l}.v"])

        def heads(t):
            return ad.transpose(t.reshape(b, n, c.heads, c.head_dim), (0, 2, 1, 3))

        qh, kh, vh = heads(q), heads(k), heads(v)
        logits = (qh @ ad.swapaxes(kh, -1, -2)) * (c.head_dim**-0.5)
        if c.proportional_attn:
            logits = logits + ad.log(state.sizes).reshape(b, 1, 1, n)
        attn = ad.softmax(logits, axis=-1)
        out = ad.transpose(attn @ vh, (0, 2, 1, 3)).reshape(b, n, d)
        out = self._dense(out, f"{p}.attn.proj")
        keys = ad.mean(kh, axis=1)  # [B, N, head_dim]
        return x + out, keys

    def ffn_forward(self, l: int, x) -> Node:
        p = f"blocks.{l}"
        xn = ad.layer_norm(x, self.p(f"{p}.ln2.w"), self.p(f"{p}.ln2.b"))
        h = ad.gelu(self._dense(xn, f"{p}.mlp.fc1"))
        out = x + self._dense(h, f"{p}.mlp.fc2")
        if f"{l}.ffn" in self.adapters:
            out = out + adaptformer_branch(x, self.adapters[f"{l}.ffn"])
        return out

    def merge(self, l: int, state: TokenState, keys):
        c = self.cfg
        m = c.merge_method
        if m == "bsm_per_layer":
            return bsm_merge(state, keys, r=c.merge_r, pattern="stripe", cosine=c.cosine)
        if m == "none" or l != c.merge_layer:
            return None
        if m == "bdm":
            return bdm_merge(
                state,
                keys,
                self.adapters.get("refine"),
                stop_grad=c.stop_grad,
                size_grad=c.size_grad,
                cosine=c.cosine,
            )
        if m == "bsm":
            return bsm_merge(state, keys, r=None, pattern=c.split_pattern, cosine=c.cosine)
        return MergeOutcome(pool_merge(state, "avg" if m == "avg_pool" else "max"))

    def block_forward(self, l: int, state: TokenState, trace: list | None = None) -> TokenState:
        tokens, keys = self.mhsa_forward(l, state)
        state = state.with_tokens(tokens)
        outcome = self.merge(l, state, keys)
        if outcome is not None:
            state = outcome.state
            if trace is not None:
                trace.append((l, outcome))
        return state.with_tokens(self.ffn_forward(l, state.tokens))

    def forward_features(self, images, trace: list | None = None) -> TokenState:
        state = self.patch_embed(images)
        for l in range(self.cfg.depth):
            state = self.block_forward(l, state, trace)
        return state

    def classify(self, state: TokenState) -> Node:
        x = ad.layer_norm(state.tokens, self.p("norm.w"), self.p("norm.b"))
        if state.has_cls:
            pooled = x[:, 0]
        else:
            pooled = ad.mean(x, axis=1)
        return self._dense(pooled, "head")

    def forward(self, images, trace: list | None = None) -> Node:
        return self.classify(self.forward_features(images, trace))

    __call__ = forward
