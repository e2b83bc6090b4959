"""Geometry-model backends.

A backend runs the network over a batch of views and exposes:

  - ``forward(images)``    -> BackendOutputs (cameras, depth maps)
  - ``softmax_modules()``  -> global-attention softmax modules to hook
  - ``patch_size``, ``feature_dim``

``MockGeometryBackend`` is a tiny deterministic transformer with the same
alternating frame-wise / global attention structure as the real model; it
exists so the hook machinery, slicing and writer can be exercised without
pretrained weights. ``VggtBackend`` adapts the real pretrained model and is
imported lazily.
"""

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .cameras import camera_from_encoding


@dataclass
class BackendOutputs:
    intrinsics: np.ndarray  # N x 3 x 3
    extrinsics: np.ndarray  # N x 3 x 4 world-to-camera
    depths: np.ndarray  # N x H x W float32
    point_maps: np.ndarray | None = None  # N x H x W x 3


class _SelfAttention(nn.Module):
    """Plain multi-head self-attention with an explicit softmax submodule."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3, bias=False)
        self.proj = nn.Linear(dim, dim, bias=False)
        self.softmax = nn.Softmax(dim=-1)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        B, T, C = tokens.shape
        head_dim = C // self.heads
        q, k, v = self.qkv(tokens).chunk(3, dim=-1)

        def split(x):
            return x.view(B, T, self.heads, head_dim).transpose(1, 2)

        q, k, v = split(q), split(k), split(v)
        attn = self.softmax(q @ k.transpose(-2, -1) / head_dim**0.5)
        out = (attn @ v).transpose(1, 2).reshape(B, T, C)
        return tokens + self.proj(out)


class MockGeometryModel(nn.Module):
    """Patchify -> alternating (frame-wise, global) attention -> tiny heads."""

    def __init__(self, patch_size: int = 16, dim: int = 32, heads: int = 2, layers: int = 2):
        super().__init__()
        self.patch_size = patch_size
        self.dim = dim
        self.embed = nn.Conv2d(3, dim, kernel_size=patch_size, stride=patch_size)
        self.frame_blocks = nn.ModuleList(_SelfAttention(dim, heads) for _ in range(layers))
        self.global_blocks = nn.ModuleList(_SelfAttention(dim, heads) for _ in range(layers))
        self.depth_head = nn.Linear(dim, patch_size * patch_size)

    def forward(self, images: torch.Tensor):
        # images: N x 3 x H x W, one frame per batch row
        N, _, H, W = images.shape
        tokens = self.embed(images).flatten(2).transpose(1, 2)  # N x K x C
        K = tokens.shape[1]
        for frame_block, global_block in zip(self.frame_blocks, self.global_blocks):
            tokens = frame_block(tokens)  # frames attend within themselves
            joint = tokens.reshape(1, N * K, self.dim)
            tokens = global_block(joint).reshape(N, K, self.dim)
        # per-token depth logits unfolded back to pixels
        h, w = H // self.patch_size, W // self.patch_size
        patches = self.depth_head(tokens)  # N x K x p*p
        depth = patches.view(N, h, w, self.patch_size, self.patch_size)
        depth = depth.permute(0, 1, 3, 2, 4).reshape(N, H, W)
        return tokens, 0.5 + torch.sigmoid(depth)


class MockGeometryBackend:
    """Deterministic desk-scale backend (seeded random weights)."""

    def __init__(self, patch_size: int = 16, seed: int = 0):
        torch.manual_seed(seed)
        self.model = MockGeometryModel(patch_size=patch_size)
        self.model.eval()
        self.patch_size = patch_size
        self.feature_dim = self.model.dim

    def softmax_modules(self):
        return [block.softmax for block in self.model.global_blocks]

    @torch.no_grad()
    def forward(self, images: np.ndarray) -> BackendOutputs:
        batch = torch.from_numpy(images.astype(np.float32) / 255.0).permute(0, 3, 1, 2)
        _, depth = self.model(batch)
        n = images.shape[0]
        H, W = images.shape[1:3]
        intrinsics = np.zeros((n, 3, 3))
        extrinsics = np.zeros((n, 3, 4))
        for i in range(n):
            # mild per-frame rotation/translation, fixed ~53 degree fov
            encoding = [1.0, 0.02 * i, 0.03 * i, 0.01 * i, 0.1 * i, 0.0, 0.8, 0.93, 0.93]
            intrinsics[i], extrinsics[i] = camera_from_encoding(np.array(encoding), (H, W))
        return BackendOutputs(
            intrinsics=intrinsics,
            extrinsics=extrinsics,
            depths=depth.numpy().astype(np.float32),
        )


class _MaterializedAttention(nn.Module):
    """Replacement forward for fused attention blocks.

    Pretrained ViT blocks typically use fused scaled-dot-product attention
    and never materialize the softmax. This wrapper recomputes attention
    from the block's own qkv projection with an explicit softmax submodule
    so the tap has something to hook. Numerically equivalent, slower.
    """

    def __init__(self, attn: nn.Module):
        super().__init__()
        if not hasattr(attn, "qkv") or not hasattr(attn, "num_heads"):
            raise RuntimeError(
                "cannot materialize attention: block lacks qkv/num_heads; "
                "pass --global-modules pointing at hookable softmax modules"
            )
        self.inner = attn
        self.softmax = nn.Softmax(dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, C = x.shape
        heads = self.inner.num_heads
        head_dim = C // heads
        qkv = self.inner.qkv(x).reshape(B, T, 3, heads, head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        if hasattr(self.inner, "q_norm"):
            q = self.inner.q_norm(q)
        if hasattr(self.inner, "k_norm"):
            k = self.inner.k_norm(k)
        attn = self.softmax(q @ k.transpose(-2, -1) * head_dim**-0.5)
        out = (attn @ v).transpose(1, 2).reshape(B, T, C)
        out = self.inner.proj(out)
        if hasattr(self.inner, "proj_drop"):
            out = self.inner.proj_drop(out)
        return out


class VggtBackend:
    """Adapter for the pretrained geometry model (imported lazily).

    Loads the published checkpoint, swaps each global-attention block's
    fused attention for a materialized version, and maps the model's pose
    encodings and depth head onto BackendOutputs via the model's own
    conversion utilities. Requires the model package and local weights; the
    mock backend covers all desk-scale testing.
    """

    def __init__(self, weights: str = "facebook/VGGT-1B", device: str = "auto"):
        try:
            from vggt.models.vggt import VGGT
        except ImportError as exc:
            raise RuntimeError(
                "pretrained backend unavailable: the 'vggt' package is not "
                "installed; install it (and download weights) or use the mock backend"
            ) from exc
        self.device = (
            "cuda" if device == "auto" and torch.cuda.is_available() else
            device if device != "auto" else "cpu"
        )
        try:
            self.model = VGGT.from_pretrained(weights).to(self.device).eval()
        except Exception as exc:
            raise RuntimeError(f"model load failure for weights {weights!r}: {exc}") from exc

        aggregator = getattr(self.model, "aggregator", None)
        blocks = getattr(aggregator, "global_blocks", None)
        if blocks is None:
            raise RuntimeError(
                "unexpected model layout: aggregator.global_blocks not found"
            )
        for block in blocks:
            block.attn = _MaterializedAttention(block.attn)
        self._blocks = blocks
        self.patch_size = getattr(aggregator, "patch_size", 14)
        self.feature_dim = getattr(aggregator, "embed_dim", 0)

    def softmax_modules(self):
        return [block.attn.softmax for block in self._blocks]

    @torch.no_grad()
    def forward(self, images: np.ndarray) -> BackendOutputs:
        from vggt.utils.pose_enc import pose_encoding_to_extri_intri

        batch = (
            torch.from_numpy(images.astype(np.float32) / 255.0)
            .permute(0, 3, 1, 2)
            .to(self.device)
        )
        predictions = self.model(batch[None])
        H, W = images.shape[1:3]
        extrinsic, intrinsic = pose_encoding_to_extri_intri(
            predictions["pose_enc"], (H, W)
        )
        depth = predictions["depth"][0, ..., 0]
        points = predictions.get("world_points")
        return BackendOutputs(
            intrinsics=intrinsic[0].cpu().numpy(),
            extrinsics=extrinsic[0].cpu().numpy(),
            depths=np.clip(depth.cpu().numpy().astype(np.float32), 0.0, None),
            point_maps=None if points is None else points[0].cpu().numpy(),
        )
