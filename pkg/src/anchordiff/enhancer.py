"""Identity enhancer: cross-attention from face rows onto the name anchor.

Face embedding rows act as queries; the two anchor rows (mean first and
last name tokens) supply keys and values.  Every output row is therefore
a learned mixture of projections of the anchor rows, which pins the
output to the small-norm, name-like region of token space regardless of
how noisy the face rows are.
"""

from . import autodiff as ad
from .attention import MultiHeadAttention


class IdentityEnhancer:
    """Maps face embedding rows into anchor-aligned token rows."""

    def __init__(self, dim, heads, anchor_rows, rng):
        anchor = ad.constant(anchor_rows, name="anchor")
        if anchor.cols != dim:
            raise ad.ShapeError(f"anchor width {anchor.cols} does not match dim {dim}")
        self.dim = dim
        self.anchor = anchor
        self.attention = MultiHeadAttention(dim, heads, rng, "enhancer")

    def params(self):
        return self.attention.params()

    def clone(self):
        """Independent copy sharing no parameter storage."""
        dup = object.__new__(IdentityEnhancer)
        dup.dim = self.dim
        dup.anchor = self.anchor
        dup.attention = self.attention.clone()
        return dup

    def enhance(self, face_rows, anchor=None):
        """Enhanced rows, same row count as face_rows, width dim.

        `anchor` overrides the stored anchor matrix when given (used by
        the permutation-invariance checks).
        """
        keys = anchor if anchor is not None else self.anchor
        return self.attention.apply(face_rows, keys)
