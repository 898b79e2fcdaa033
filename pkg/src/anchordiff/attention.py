"""Multi-head attention over row-major token matrices.

One weight bundle serves both attention uses in the model: queries from
one sequence against keys/values from another (the enhancer) and full
self-attention (the adapter).  Heads are evaluated one at a time; the
usual concat-then-project output step is expressed equivalently as a sum
of per-head slices of the output projection, which keeps the graph
inside the fixed op set.
"""

import math

from . import autodiff as ad


class MultiHeadAttention:
    """h heads of width head_dim, with head_dim * h == dim.

    Per head: A = softmax_rows(Q Kᵀ / sqrt(head_dim)), out = A V, where
    Q comes from the query rows and K, V from the context rows.  Head
    outputs are projected back to dim and summed.
    """

    def __init__(self, dim, heads, rng, name):
        if dim % heads != 0:
            raise ad.ContractError(f"dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        std = 1.0 / math.sqrt(dim)
        self.w_q = [ad.Parameter(rng.normal(dim, self.head_dim, std), f"{name}.q{h}")
                    for h in range(heads)]
        self.w_k = [ad.Parameter(rng.normal(dim, self.head_dim, std), f"{name}.k{h}")
                    for h in range(heads)]
        self.w_v = [ad.Parameter(rng.normal(dim, self.head_dim, std), f"{name}.v{h}")
                    for h in range(heads)]
        self.w_out = ad.Parameter(rng.normal(dim, dim, std), f"{name}.out")

    def params(self):
        return [*self.w_q, *self.w_k, *self.w_v, self.w_out]

    def clone(self):
        """Independent copy sharing no parameter storage."""
        dup = object.__new__(MultiHeadAttention)
        dup.dim, dup.heads, dup.head_dim = self.dim, self.heads, self.head_dim
        dup.w_q = [_copy_param(p) for p in self.w_q]
        dup.w_k = [_copy_param(p) for p in self.w_k]
        dup.w_v = [_copy_param(p) for p in self.w_v]
        dup.w_out = _copy_param(self.w_out)
        return dup

    def apply(self, query_rows, context_rows):
        """Attend query_rows over context_rows; output keeps the query row count."""
        if query_rows.cols != self.dim or context_rows.cols != self.dim:
            raise ad.ShapeError(
                f"attention built for width {self.dim}, got "
                f"{query_rows.shape} against {context_rows.shape}")
        out = None
        inv = 1.0 / math.sqrt(self.head_dim)
        for h in range(self.heads):
            q = ad.matmul(query_rows, self.w_q[h])
            k = ad.matmul(context_rows, self.w_k[h])
            v = ad.matmul(context_rows, self.w_v[h])
            att = ad.softmax_rows(ad.scale(ad.matmul(q, ad.transpose(k)), inv))
            head = ad.matmul(att, v)
            # row block h of w_out is exactly the slice the concatenated
            # head output would have multiplied
            proj = ad.matmul(head, ad.slice_rows(self.w_out, h * self.head_dim,
                                                 (h + 1) * self.head_dim))
            out = proj if out is None else ad.add(out, proj)
        return out

    def attention_weights(self, query_rows, context_rows, head):
        """The softmax matrix of one head, for diagnostics."""
        q = ad.matmul(query_rows, self.w_q[head])
        k = ad.matmul(context_rows, self.w_k[head])
        logits = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(self.head_dim))
        return ad.softmax_rows(logits)


def _copy_param(p):
    return ad.Parameter(p.value.copy(), p.name, trainable=p.trainable)
