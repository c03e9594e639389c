"""Token reduction: bipartite splits, soft and differentiable matching, pooling.

All merges average tokens weighted by their sizes and sum the sizes, so the
size-weighted token sum and the total patch count are both conserved.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import tensor as T
from .adapters import AdapterWeights, refine_keys
from .autodiff import Node
from .state import TokenState

PATTERNS = ("stripe", "checkerboard")


@dataclass(frozen=True)
class SplitAssignment:
    """Token-axis indices of the two bipartite sets."""

    idx_a: np.ndarray
    idx_b: np.ndarray
    pattern: str


@dataclass
class MatchResult:
    soft: Node
    hard: np.ndarray
    ste: Node
    dest: np.ndarray


@dataclass
class BsmMatch:
    """Soft-matching selection, in A-local / B-local coordinates."""

    src: np.ndarray  # [B, r] A rows that merge
    dst: np.ndarray  # [B, r] their B targets
    unmerged: np.ndarray  # [B, N_A - r] remaining A rows, ascending
    num_b: int

    def matrix(self, dtype=np.float64) -> np.ndarray:
        """One-hot rows for merged A tokens, zero rows for the rest."""
        bsz, r = self.src.shape
        n_a = r + self.unmerged.shape[1]
        m = np.zeros((bsz, n_a, self.num_b), dtype=dtype)
        bi = np.arange(bsz)[:, None]
        m[bi, self.src, self.dst] = 1
        return m


def split(state: TokenState, pattern: str) -> SplitAssignment:
    """Assign patch tokens to sets A and B; the cls token always opens B."""
    off = state.offset
    n = state.num_patch_tokens
    if pattern == "stripe":
        flat = np.arange(n)
        a = flat[flat % 2 == 0]
        b = flat[flat % 2 == 1]
    elif pattern == "checkerboard":
        if state.grid is None:
            raise ValueError("checkerboard split needs a rectangular patch grid")
        h, w = state.grid
        if (h * w) % 2:
            raise ValueError(f"checkerboard split needs an even patch count, grid is {h}x{w}")
        i, j = np.divmod(np.arange(h * w), w)
        parity = (i + j) % 2
        a = np.flatnonzero(parity == 0)
        b = np.flatnonzero(parity == 1)
    else:
        raise ValueError(f"unknown split pattern {pattern!r}")
    a = a + off
    b = b + off
    if state.has_cls:
        b = np.concatenate([[0], b])
    return SplitAssignment(a.astype(np.int64), b.astype(np.int64), pattern)


def similarity(k_a, k_b, mask_cls: bool = False, cosine: bool = False) -> Node:
    """Dot-product similarity ``k_a @ k_b^T``; with ``mask_cls`` column 0 is -inf."""
    k_a, k_b = ad.as_node(k_a), ad.as_node(k_b)
    if k_a.shape[-1] != k_b.shape[-1]:
        raise ValueError(f"key dims differ: {k_a.shape} vs {k_b.shape}")
    if cosine:
        k_a = k_a / ad.exp(0.5 * ad.log((k_a * k_a).sum(-1, keepdims=True)))
        k_b = k_b / ad.exp(0.5 * ad.log((k_b * k_b).sum(-1, keepdims=True)))
    c = k_a @ ad.swapaxes(k_b, -1, -2)
    if mask_cls:
        mask = np.zeros(c.shape, dtype=bool)
        mask[..., 0] = True
        c = ad.masked_fill(c, mask, -np.inf)
    return c


def bsm_match(c, r: int) -> BsmMatch:
    """Merge the ``r`` A rows with the highest best-match score into their best B column."""
    c = c.value if isinstance(c, Node) else np.asarray(c)
    bsz, n_a, n_b = c.shape
    if r > n_a:
        raise ValueError(f"cannot merge r={r} tokens from a set of {n_a}")
    if r < 0:
        raise ValueError("r must be non-negative")
    node_max, node_idx = T.reduce("max", c, axis=-1)
    _, order = T.topk(node_max, n_a, axis=-1)
    src = order[:, :r]
    unmerged = np.sort(order[:, r:], axis=-1)
    dst = np.take_along_axis(node_idx, src, axis=-1)
    return BsmMatch(src, dst, unmerged, n_b)


def bdm_match(c) -> MatchResult:
    """Differentiable one-hot matching of every A row to one B column.

    The soft matrix is ``sigmoid(c - mean(top1, top2))`` per row.  The hard
    matrix is the row argmax, lowest index on ties; when the row maximum is
    unique this is the same as thresholding the soft matrix at 0.5.
    """
    c = ad.as_node(c)
    if c.shape[-1] < 2:
        raise ValueError("differentiable matching needs at least two B tokens")
    vals, idx = T.topk(c.value, 2, axis=-1)
    if not np.isfinite(vals).all():
        raise ValueError("differentiable matching needs two finite similarities per row")
    top2 = ad.take_along_axis(c, idx, axis=-1)
    centre = ad.mean(top2, axis=-1, keepdims=True)
    soft = ad.sigmoid(c - centre)
    dest = T.argmax(c.value, axis=-1)
    hard = T.one_hot(dest, c.shape[-1], dtype=c.dtype)
    return MatchResult(soft, hard, ad.ste(soft, hard), dest)


def _gather_tokens(x: Node, idx: np.ndarray) -> Node:
    return x[:, idx]


def _weighted_merge(state: TokenState, sp: SplitAssignment, matrix, size_grad: bool):
    """Fold A tokens into B through ``matrix`` [B, N_A, N_B]; returns (tokens, sizes)."""
    x_a = _gather_tokens(state.tokens, sp.idx_a)
    x_b = _gather_tokens(state.tokens, sp.idx_b)
    s_a = state.sizes[:, sp.idx_a]
    s_b = state.sizes[:, sp.idx_b]
    m_t = ad.swapaxes(matrix, -1, -2)
    incoming = m_t @ (x_a * s_a.reshape(s_a.shape + (1,)))
    incoming_size = (m_t @ s_a.reshape(s_a.shape + (1,))).reshape(s_b.shape)
    size_matrix = m_t if size_grad else ad.Node(np.asarray(m_t.value))
    new_sizes = s_b + (size_matrix @ s_a.reshape(s_a.shape + (1,))).reshape(s_b.shape)
    # x_b + (sum s_i x_i - x_b sum s_i) / S equals the size-weighted mean and
    # leaves B tokens that receive nothing bitwise unchanged
    delta = incoming - x_b * incoming_size.reshape(s_b.shape + (1,))
    merged = x_b + delta / new_sizes.reshape(new_sizes.shape + (1,))
    return merged, new_sizes


def _remap(state: TokenState, old_to_new: np.ndarray) -> np.ndarray:
    return np.take_along_axis(old_to_new, state.patch_map, axis=1)


def merge_bdm(state: TokenState, sp: SplitAssignment, match: MatchResult, size_grad: bool = True) -> TokenState:
    """Every A token joins its matched B token; only B tokens remain."""
    n_a, n_b = len(sp.idx_a), len(sp.idx_b)
    if match.ste.shape != (state.batch, n_a, n_b):
        raise ValueError(f"match shape {match.ste.shape} inconsistent with split ({n_a}, {n_b})")
    tokens, sizes = _weighted_merge(state, sp, match.ste, size_grad)

    old_to_new = np.empty((state.batch, state.num_tokens), dtype=np.int64)
    old_to_new[:, sp.idx_b] = np.arange(n_b)
    old_to_new[:, sp.idx_a] = match.dest
    return TokenState(tokens, sizes, None, state.has_cls, _remap(state, old_to_new))


def merge_bsm(state: TokenState, sp: SplitAssignment, match: BsmMatch) -> TokenState:
    """Merged pairs fold into B; output is B tokens then unmerged A tokens in order."""
    n_a, n_b = len(sp.idx_a), len(sp.idx_b)
    if match.num_b != n_b or match.src.shape[1] + match.unmerged.shape[1] != n_a:
        raise ValueError("soft-matching selection inconsistent with split")
    m = Node(match.matrix(dtype=state.tokens.dtype))
    merged, merged_sizes = _weighted_merge(state, sp, m, size_grad=False)

    bi = np.arange(state.batch)[:, None]
    unm_tok = sp.idx_a[match.unmerged]  # [B, U] token-axis indices
    x_unm = ad.take_along_axis(state.tokens, unm_tok[..., None], axis=1)
    s_unm = ad.take_along_axis(state.sizes, unm_tok, axis=1)
    tokens = ad.concat([merged, x_unm], axis=1)
    sizes = ad.concat([merged_sizes, s_unm], axis=1)

    old_to_new = np.empty((state.batch, state.num_tokens), dtype=np.int64)
    old_to_new[:, sp.idx_b] = np.arange(n_b)
    old_to_new[bi, sp.idx_a[match.src]] = match.dst
    old_to_new[bi, unm_tok] = n_b + np.arange(unm_tok.shape[1])
    return TokenState(tokens, sizes, None, state.has_cls, _remap(state, old_to_new))


def merge_apply(state: TokenState, sp: SplitAssignment, match, size_grad: bool = True) -> TokenState:
    if isinstance(match, MatchResult):
        return merge_bdm(state, sp, match, size_grad)
    if isinstance(match, BsmMatch):
        return merge_bsm(state, sp, match)
    raise TypeError(f"unsupported match type {type(match).__name__}")


def pool_merge(state: TokenState, mode: str) -> TokenState:
    """Combine horizontally adjacent patch pairs; the grid halves in width."""
    if mode not in ("avg", "max"):
        raise ValueError(f"unknown pooling mode {mode!r}")
    if state.grid is None:
        raise ValueError("pooling needs a rectangular patch grid")
    h, w = state.grid
    if w % 2:
        raise ValueError(f"pooling needs an even grid width, got {w}")
    off = state.offset
    flat = np.arange(h * w).reshape(h, w)
    left = flat[:, 0::2].ravel() + off
    right = flat[:, 1::2].ravel() + off

    x_l, x_r = _gather_tokens(state.tokens, left), _gather_tokens(state.tokens, right)
    s_l, s_r = state.sizes[:, left], state.sizes[:, right]
    sizes = s_l + s_r
    if mode == "avg":
        num = x_l * s_l.reshape(s_l.shape + (1,)) + x_r * s_r.reshape(s_r.shape + (1,))
        pooled = num / sizes.reshape(sizes.shape + (1,))
    else:
        pooled = ad.maximum(x_l, x_r)

    if state.has_cls:
        pooled = ad.concat([state.tokens[:, :1], pooled], axis=1)
        sizes = ad.concat([state.sizes[:, :1], sizes], axis=1)

    old_to_new = np.empty(state.num_tokens, dtype=np.int64)
    old_to_new[:off] = np.arange(off)
    old_to_new[left] = off + np.arange(len(left))
    old_to_new[right] = off + np.arange(len(right))
    old_to_new = np.broadcast_to(old_to_new, (state.batch, state.num_tokens))
    return TokenState(pooled, sizes, (h, w // 2), state.has_cls, _remap(state, old_to_new))


@dataclass
class MergeOutcome:
    state: TokenState
    split: SplitAssignment | None = None
    match: MatchResult | BsmMatch | None = None
    extra: dict = field(default_factory=dict)


def bdm_merge(
    state: TokenState,
    keys,
    refine: AdapterWeights | None = None,
    stop_grad: bool = True,
    size_grad: bool = True,
    cosine: bool = False,
) -> MergeOutcome:
    """Checkerboard split, refined-key similarity, STE matching, merge."""
    keys = ad.as_node(keys)
    if stop_grad:
        keys = ad.stop_gradient(keys)
    if refine is not None:
        keys = refine_keys(keys, refine)
    sp = split(state, "checkerboard")
    c = similarity(keys[:, sp.idx_a], keys[:, sp.idx_b], mask_cls=state.has_cls, cosine=cosine)
    match = bdm_match(c)
    return MergeOutcome(merge_bdm(state, sp, match, size_grad), sp, match, {"similarity": c})


def bsm_merge(state: TokenState, keys, r: int | None = None, pattern: str = "stripe", cosine: bool = False) -> MergeOutcome:
    """Soft matching; ``r=None`` merges every A token (halves the patch count)."""
    keys = ad.as_node(keys)
    sp = split(state, pattern)
    k = keys.value
    c = similarity(k[:, sp.idx_a], k[:, sp.idx_b], mask_cls=state.has_cls, cosine=cosine)
    r = len(sp.idx_a) if r is None else min(r, len(sp.idx_a))
    match = bsm_match(c, r)
    return MergeOutcome(merge_bsm(state, sp, match), sp, match, {"similarity": c})


def group_map(state: TokenState, grid: tuple[int, int]) -> np.ndarray:
    """Per-sample [H, W] map of the token index holding each original patch."""
    h, w = grid
    return state.patch_map.reshape(state.batch, h, w).copy()


def relabel_groups(groups: np.ndarray) -> np.ndarray:
    """Renumber group ids 0..k-1 in first-appearance (row-major) order."""
    flat = groups.ravel()
    _, first = np.unique(flat, return_index=True)
    order = np.argsort(first, kind="stable")
    lut = {int(flat[first[o]]): i for i, o in enumerate(order)}
    return np.vectorize(lut.__getitem__)(groups)
