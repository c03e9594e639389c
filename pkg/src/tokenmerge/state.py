from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import Node


@dataclass
class TokenState:
    """Tokens flowing through the encoder.

    ``sizes`` counts how many original patches each token stands for.
    ``grid`` is the current row-major patch layout, or ``None`` once a merge
    has left the patches in no rectangular arrangement.  ``patch_map[b, p]``
    is the index of the token that now holds original patch ``p``.
    """

    tokens: Node
    sizes: Node
    grid: tuple[int, int] | None
    has_cls: bool
    patch_map: np.ndarray

    @classmethod
    def fresh(cls, tokens: Node, grid: tuple[int, int], has_cls: bool) -> "TokenState":
        b, n, _ = tokens.shape
        num_patches = grid[0] * grid[1]
        if n != num_patches + int(has_cls):
            raise ValueError(f"{n} tokens do not fit grid {grid} (cls={has_cls})")
        sizes = Node(np.ones((b, n), dtype=tokens.dtype))
        off = int(has_cls)
        patch_map = np.broadcast_to(np.arange(off, off + num_patches), (b, num_patches)).copy()
        return cls(tokens, sizes, tuple(grid), has_cls, patch_map)

    @property
    def batch(self) -> int:
        return self.tokens.shape[0]

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[1]

    @property
    def dim(self) -> int:
        return self.tokens.shape[2]

    @property
    def offset(self) -> int:
        return int(self.has_cls)

    @property
    def num_patch_tokens(self) -> int:
        return self.num_tokens - self.offset

    @property
    def num_patches(self) -> int:
        """Original patch count, which merging never changes."""
        return self.patch_map.shape[1]

    def patch_sizes(self) -> np.ndarray:
        return self.sizes.value[:, self.offset:]

    def with_tokens(self, tokens: Node) -> "TokenState":
        if tokens.shape[:2] != self.tokens.shape[:2]:
            raise ValueError("token count changed outside a merge")
        return replace(self, tokens=tokens)
