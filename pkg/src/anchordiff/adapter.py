"""Gated context adapter: fuse enhanced identity rows into the text context.

The enhanced rows are projected, appended below the text context, and
the joined matrix self-attends.  Only the text-token positions of the
result are kept, scaled by beta * tanh(gate), and added back onto the
context.  The gate starts at exactly zero, so an untrained adapter is a
bit-for-bit pass-through and training opens the fusion gradually.
"""

from . import autodiff as ad
from .attention import MultiHeadAttention


class GatedContextAdapter:
    """Residual fusion of identity rows into an N-row text context."""

    def __init__(self, dim, heads, beta, rng, double_attention=False):
        self.dim = dim
        self.beta = float(beta)
        self.double_attention = bool(double_attention)
        std = 1.0 / dim ** 0.5
        self.projection = ad.Parameter(rng.normal(dim, dim, std), "adapter.project")
        self.attention = MultiHeadAttention(dim, heads, rng, "adapter")
        self.gate = ad.Parameter([[0.0]], "adapter.gate")

    def params(self):
        return [self.projection, *self.attention.params(), self.gate]

    def clone(self):
        """Independent copy sharing no parameter storage."""
        dup = object.__new__(GatedContextAdapter)
        dup.dim = self.dim
        dup.beta = self.beta
        dup.double_attention = self.double_attention
        dup.projection = ad.Parameter(self.projection.value.copy(),
                                      self.projection.name)
        dup.attention = self.attention.clone()
        dup.gate = ad.Parameter(self.gate.value.copy(), self.gate.name)
        return dup

    def adapt(self, context_rows, identity_rows):
        """context + beta * tanh(gate) * text-slice of self-attended join."""
        if context_rows.cols != self.dim or identity_rows.cols != self.dim:
            raise ad.ShapeError(
                f"adapter built for width {self.dim}, got "
                f"{context_rows.shape} and {identity_rows.shape}")
        projected = ad.matmul(identity_rows, ad.transpose(self.projection))
        joined = ad.concat_rows(context_rows, projected)
        mixed = self.attention.apply(joined, joined)
        text_part = ad.slice_rows(mixed, 0, context_rows.rows)
        if self.double_attention:
            # alternative reading: a second attention pass over the kept rows
            text_part = self.attention.apply(text_part, text_part)
        gated = ad.scale(ad.scale(text_part, ad.tanh(self.gate)), self.beta)
        return ad.add(context_rows, gated)
