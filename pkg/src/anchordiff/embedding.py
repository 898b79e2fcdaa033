"""Synthetic embedding world: name table, identities, faces, scenes.

Everything here is fixed ground truth drawn from named rng streams; none
of it is trained.  The world defines what "identity" and "prompt" mean
for the rest of the system:

  * a table of name embeddings whose mean rows form the identity anchor,
  * a hidden identity latent `u` behind each subject, with linear maps
    to its face embedding rows and its two name-token rows,
  * orthonormal probes pairing the denoiser latent space with the
    identity space and with the token space, used to build clean target
    latents and to score generated ones,
  * a frozen token-mixing text encoder, whose off-diagonal mass leaks
    identity-token drift into scene tokens.
"""

import math

import numpy as np

from . import autodiff as ad


def normalize_rows(x):
    """Rows scaled to unit euclidean length; zero rows are left zero."""
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    return x / safe


def orthonormal_columns(rows, cols, rng):
    """A rows x cols matrix with orthonormal columns, deterministic in rng.

    QR of a gaussian draw, with column signs fixed by the diagonal of R
    so the factorization is unique.
    """
    if cols > rows:
        raise ad.ShapeError(f"orthonormal_columns: need rows >= cols, got {rows}x{cols}")
    a = rng.normal(rows, cols)
    q, r = np.linalg.qr(a)
    signs = np.sign(np.diag(r))
    signs[signs == 0.0] = 1.0
    return q * signs


class TokenEmbeddingTable:
    """A bank of name embeddings, two unit token vectors per entry.

    Name tokens are unit-normalized gaussians with a shared mean
    direction per slot, so the vocabulary forms a cluster rather than a
    symmetric cloud.  That mirrors how real name embeddings share a
    name-like direction, and it is what gives the anchor its meaning:
    the identity anchor is the 2 x dim matrix of columnwise means, and
    with clustered entries it sits near every name instead of near the
    origin.  `concentration` sets cluster tightness: the center scaled
    by it competes against per-coordinate unit noise.
    """

    def __init__(self, entries, dim, rng, concentration=12.0):
        if entries < 1:
            raise ad.ContractError("table needs at least one entry")
        self.entries = entries
        self.dim = dim
        self.concentration = float(concentration)
        self.centers = rng.unit_rows(2, dim)
        spread_first = rng.normal(entries, dim)
        spread_last = rng.normal(entries, dim)
        self.first_tokens = normalize_rows(
            self.concentration * self.centers[0] + spread_first)
        self.last_tokens = normalize_rows(
            self.concentration * self.centers[1] + spread_last)

    def anchor(self):
        return np.stack([
            self.first_tokens.mean(axis=0),
            self.last_tokens.mean(axis=0),
        ])


class IdentityWorld:
    """Hidden identity latents and the fixed linear maps out of them.

    An identity is a unit vector u in R^id_dim.  The world can render u
    as face embedding rows (plus per-photo noise), as two name-token
    rows, and as a direction in the denoiser latent space.  Target
    latents blend the identity direction with the scene direction so
    that both similarity probes have signal to find.
    """

    def __init__(self, id_dim, token_dim, latent_dim, face_rows, rng,
                 id_weight=1.0, prompt_weight=1.0, target_scale=1.0,
                 name_centers=None, name_concentration=0.0):
        if latent_dim < id_dim:
            raise ad.ShapeError(
                f"latent space ({latent_dim}) must hold the identity space ({id_dim})")
        if token_dim < latent_dim:
            raise ad.ShapeError(
                f"token space ({token_dim}) must hold the latent space ({latent_dim})")
        self.id_dim = id_dim
        self.token_dim = token_dim
        self.latent_dim = latent_dim
        self.face_rows = face_rows
        self.id_weight = float(id_weight)
        self.prompt_weight = float(prompt_weight)
        self.target_scale = float(target_scale)

        self.u_ref = rng.stream("u-ref").unit_rows(1, id_dim)
        # face map entries have std 1/sqrt(id_dim) per output coordinate,
        # so each clean face row of a unit identity has norm near 1
        face_rng = rng.stream("face")
        self.face_maps = [
            face_rng.normal(id_dim, token_dim, std=1.0 / math.sqrt(id_dim))
            for _ in range(face_rows)
        ]
        name_rng = rng.stream("name")
        self.name_first = name_rng.normal(id_dim, token_dim)
        self.name_last = name_rng.normal(id_dim, token_dim)
        # when a vocabulary center is supplied, this world's names live in
        # the same cluster the anchor summarizes
        if name_centers is None:
            name_centers = np.zeros((2, token_dim))
        self.name_centers = np.asarray(name_centers, dtype=np.float64)
        self.name_concentration = float(name_concentration)
        # latent_probe: latent space -> identity space, orthonormal columns
        self.latent_probe = orthonormal_columns(latent_dim, id_dim, rng.stream("latent-probe"))
        # prompt_probe columns span the slice of token space the latent can express
        self.prompt_probe = orthonormal_columns(token_dim, latent_dim, rng.stream("prompt-probe"))

    def sample_identity(self, rng):
        return rng.unit_rows(1, self.id_dim)

    def encode_face(self, u, noise_rng=None, noise_scale=0.0):
        """Face embedding rows for identity u, optionally with photo noise."""
        rows = np.concatenate([u @ fm for fm in self.face_maps], axis=0)
        if noise_rng is not None and noise_scale > 0.0:
            rows = rows + noise_rng.normal(self.face_rows, self.token_dim, std=noise_scale)
        return rows

    def name_tokens(self, u):
        """The two unit token rows a text encoder would see for u's name."""
        spread = np.concatenate([u @ self.name_first, u @ self.name_last], axis=0)
        return normalize_rows(self.name_concentration * self.name_centers + spread)

    def identity_direction(self, u):
        """Unit latent-space direction that scores 1.0 against identity u."""
        return normalize_rows(u @ self.latent_probe.T)

    def prompt_direction(self, scene_tokens):
        """Unit latent-space direction for a scene's mean token."""
        mean = scene_tokens.mean(axis=0, keepdims=True)
        return normalize_rows(mean @ self.prompt_probe)

    def target_latent(self, u, scene_tokens):
        """Clean latent for (identity, scene), norm target_scale*sqrt(latent_dim).

        The blend of the two unit directions is renormalized, so the
        identity share of the target depends only on the weights, not on
        the angle luck of the draw.  target_scale sets the signal size
        relative to unit-variance corruption noise.
        """
        mix = (self.id_weight * self.identity_direction(u)
               + self.prompt_weight * self.prompt_direction(scene_tokens))
        return self.target_scale * math.sqrt(self.latent_dim) * normalize_rows(mix)


def sample_scene(rows, dim, rng):
    """Unit token rows standing in for an encoded scene description."""
    return rng.unit_rows(rows, dim)


class TextEncoder:
    """Frozen token mixer standing in for a text encoder.

    encode() multiplies the token rows by I + mix_strength * G with G a
    fixed gaussian, so every output row is mostly its own input row plus
    a faint mixture of the others.  That leak is what lets a drifted
    identity token degrade the scene rows downstream.
    """

    def __init__(self, n_tokens, mix_strength, rng):
        self.n_tokens = n_tokens
        self.mix_strength = float(mix_strength)
        g = rng.normal(n_tokens, n_tokens, std=1.0 / math.sqrt(n_tokens))
        self.mix = np.eye(n_tokens) + self.mix_strength * g

    def encode(self, token_rows):
        """Graph-aware encoding of an n_tokens x dim tensor."""
        if token_rows.rows != self.n_tokens:
            raise ad.ShapeError(
                f"encoder expects {self.n_tokens} token rows, got {token_rows.rows}")
        return ad.matmul(ad.constant(self.mix, name="text-mixer"), token_rows)

    def encode_array(self, rows):
        if rows.shape[0] != self.n_tokens:
            raise ad.ShapeError(
                f"encoder expects {self.n_tokens} token rows, got {rows.shape[0]}")
        return self.mix @ rows
