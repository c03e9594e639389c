"""Closed-form multiply-accumulate counts for ViT encoders under merge schedules.

One multiply-add counts as one FLOP.  Softmax, normalisation, activations
and biases are not counted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .model import VitConfig, token_schedule

PRESETS = {
    "vitb16": dict(depth=12, dim=768, heads=12, mlp_ratio=4.0, grid=(14, 14), patch=16, channels=3, num_classes=1000, use_cls=True),
}


def preset_config(name: str, **overrides) -> VitConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return VitConfig(**{**PRESETS[name], **overrides})


def attn_flops(n: int, d: int) -> int:
    # QKV + scores + attn@V + output projection
    return 3 * n * d * d + 2 * n * n * d + n * d * d


def ffn_flops(n: int, d: int, mlp_ratio: float) -> int:
    return int(round(2 * mlp_ratio * n * d * d))


def layer_flops(n: int, d: int, mlp_ratio: float = 4.0) -> int:
    """MACs of one encoder layer at a fixed token count: (4 + 2r)nd^2 + 2n^2d."""
    if n <= 0 or d <= 0:
        raise ValueError("token count and dim must be positive")
    return attn_flops(n, d) + ffn_flops(n, d, mlp_ratio)


@dataclass
class FlopsReport:
    per_layer: list[int]
    embed: int
    adapters: int
    merge_module: int
    head: int
    tokens: list[tuple[int, int]] = field(default_factory=list)
    baseline_total: int | None = None

    @property
    def total(self) -> int:
        return sum(self.per_layer) + self.embed + self.adapters + self.merge_module + self.head

    @property
    def reduction_vs_baseline(self) -> float:
        if not self.baseline_total:
            return 0.0
        return 1.0 - self.total / self.baseline_total

    def as_dict(self) -> dict:
        d = {
            "total": self.total,
            "total_g": round(self.total / 1e9, 4),
            "embed": self.embed,
            "adapters": self.adapters,
            "merge_module": self.merge_module,
            "head": self.head,
            "baseline_total": self.baseline_total,
            "reduction_vs_baseline": round(self.reduction_vs_baseline, 6),
        }
        for i, (macs, (na, nf)) in enumerate(zip(self.per_layer, self.tokens)):
            d[f"layer{i}"] = macs
            d[f"layer{i}_tokens"] = f"{na}->{nf}"
        return d

    def to_kv(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.as_dict().items())

    def to_text(self) -> str:
        lines = [f"{'layer':>5}  {'tokens':>9}  {'GMACs':>8}"]
        for i, (macs, (na, nf)) in enumerate(zip(self.per_layer, self.tokens)):
            tok = f"{na}" if na == nf else f"{na}->{nf}"
            lines.append(f"{i:>5}  {tok:>9}  {macs / 1e9:8.4f}")
        lines.append(f"embed        {self.embed / 1e9:.4f} G")
        lines.append(f"adapters     {self.adapters / 1e9:.4f} G")
        lines.append(f"merge module {self.merge_module / 1e9:.6f} G")
        lines.append(f"head         {self.head / 1e9:.6f} G")
        total = f"total        {self.total / 1e9:.2f} G"
        if self.baseline_total:
            total += f" ({-100 * self.reduction_vs_baseline:+.1f}% vs {self.baseline_total / 1e9:.2f} G)"
        lines.append(total)
        return "\n".join(lines)


def _adapter_flops(cfg: VitConfig, n_attn: int, n_ffn: int) -> int:
    h, d = cfg.adapter_hidden, cfg.dim
    if cfg.adapter == "lora":
        return 2 * n_attn * 2 * d * h
    if cfg.adapter == "adaptformer":
        return n_ffn * 2 * d * h
    return 0


def _merge_flops(cfg: VitConfig, n: int) -> int:
    m = cfg.merge_method
    patches = n - int(cfg.use_cls)
    n_a = (patches + 1) // 2
    n_b = n - n_a
    dk = cfg.head_dim
    if m == "bdm":
        refine = n * 2 * dk * cfg.refine_hidden if cfg.refine_hidden > 0 else 0
        return n_a * n_b * dk + refine
    if m in ("bsm", "bsm_per_layer"):
        return n_a * n_b * dk
    return 0


def model_flops(cfg: VitConfig, with_baseline: bool = True) -> FlopsReport:
    d, r = cfg.dim, cfg.mlp_ratio
    sched = token_schedule(cfg)
    per_layer, adapters, merge = [], 0, 0
    for layer, (n_attn, n_ffn) in enumerate(sched):
        per_layer.append(attn_flops(n_attn, d) + ffn_flops(n_ffn, d, r))
        adapters += _adapter_flops(cfg, n_attn, n_ffn)
        merged_here = cfg.merge_method == "bsm_per_layer" or (
            cfg.merge_method != "none" and layer == cfg.merge_layer
        )
        if merged_here:
            merge += _merge_flops(cfg, n_attn)
    embed = cfg.num_patches * d * cfg.channels * cfg.patch * cfg.patch
    head = d * cfg.num_classes
    report = FlopsReport(per_layer, embed, adapters, merge, head, tokens=sched)
    if with_baseline:
        base = VitConfig.from_dict({**cfg.to_dict(), "merge_method": "none", "merge_layer": None})
        report.baseline_total = model_flops(base, with_baseline=False).total
    return report


def layer_sweep(cfg: VitConfig, layers=None) -> dict[int, FlopsReport]:
    layers = range(cfg.depth) if layers is None else layers
    out = {}
    for l in layers:
        c = VitConfig.from_dict({**cfg.to_dict(), "merge_layer": l})
        out[l] = model_flops(c)
    return out
