"""Text conditioning: deterministic prompt embeddings and cross attention.

The embedding is a desk-scale stand-in for a pretrained text encoder: each
whitespace token hashes to the seed of a pseudo-random unit vector, so
distinct prompts give distinct conditioning while the whole map stays a pure
function of (prompt, seed). ``cross_attention`` is the scaled dot-product
primitive shared with the denoiser's conditioning blocks.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch

from .rng import DTYPE


@dataclass(frozen=True)
class AttentionWeights:
    """Projection matrices for one cross-attention layer.

    ``w_query`` maps feature dim -> dim, ``w_key``/``w_value`` map the text
    embedding dim -> dim; ``dim`` is the scaling divisor under the square root.
    """

    w_query: torch.Tensor
    w_key: torch.Tensor
    w_value: torch.Tensor
    dim: int

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValueError(f"attention dim must be >= 1, got {self.dim}")
        if self.w_query.shape[1] != self.dim or self.w_key.shape[1] != self.dim:
            raise ValueError("w_query/w_key output dim must equal attention dim")
        if self.w_key.shape[0] != self.w_value.shape[0]:
            raise ValueError("w_key and w_value must share the text input dim")


def _token_vector(token: str, dim: int, seed: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}\x1f{token}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    vec = rng.standard_normal(dim)
    return vec / np.linalg.norm(vec)


def embed_prompt(
    prompt: str,
    token_count: int = 8,
    dim: int = 16,
    seed: int = 0,
) -> torch.Tensor:
    """Embed a prompt as ``(token_count, dim)`` unit rows, padded or truncated.

    Raises ``ValueError`` on a prompt with no tokens. Unfilled slots embed a
    reserved per-position padding token so rows stay unit-norm.
    """
    if token_count < 1 or dim < 1:
        raise ValueError("token_count and dim must be >= 1")
    tokens = prompt.split()
    if not tokens:
        raise ValueError("prompt must contain at least one token")
    rows = []
    for i in range(token_count):
        token = tokens[i] if i < len(tokens) else f"\x00pad{i}"
        rows.append(_token_vector(token, dim, seed))
    return torch.as_tensor(np.stack(rows), dtype=DTYPE)


def cross_attention(
    features: torch.Tensor,
    embedding: torch.Tensor,
    weights: AttentionWeights,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Scaled dot-product attention of latent features over text tokens.

    Returns ``(output, attention_map)`` where the map is the row-wise softmax
    of ``(features W_Q)(C W_K)^T / sqrt(dim)`` with shape
    ``(num_queries, num_tokens)`` and the output is ``map @ (C W_V)``.
    """
    if features.ndim != 2 or embedding.ndim != 2:
        raise ValueError("features and embedding must be rank-2")
    if features.shape[1] != weights.w_query.shape[0]:
        raise ValueError(
            f"feature dim {features.shape[1]} does not match "
            f"w_query input dim {weights.w_query.shape[0]}"
        )
    if embedding.shape[1] != weights.w_key.shape[0]:
        raise ValueError(
            f"embedding dim {embedding.shape[1]} does not match "
            f"w_key input dim {weights.w_key.shape[0]}"
        )
    queries = features @ weights.w_query
    keys = embedding @ weights.w_key
    values = embedding @ weights.w_value
    logits = queries @ keys.T / math.sqrt(weights.dim)
    attn_map = torch.softmax(logits, dim=-1)
    return attn_map @ values, attn_map
