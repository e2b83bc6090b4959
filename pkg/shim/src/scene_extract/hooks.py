"""Forward-hook capture of post-softmax global-attention maps.

The tap registers hooks on the softmax submodules of the model's global
attention blocks. Each forward pass yields, per layer, a tensor of shape
(heads, N*K, N*K) over the joint token sequence of all frames; heads are
averaged immediately to bound memory.
"""

import torch


class AttentionTap:
    """Collects head-averaged attention from a list of softmax modules."""

    def __init__(self, softmax_modules):
        self._handles = []
        self.layers: list[torch.Tensor] = []
        for module in softmax_modules:
            self._handles.append(module.register_forward_hook(self._grab))

    def _grab(self, module, inputs, output):
        # output: (batch, heads, queries, keys) post-softmax
        if output.dim() != 4:
            raise RuntimeError(
                f"expected 4D attention (B, heads, Q, K), got {tuple(output.shape)}"
            )
        self.layers.append(output.detach().mean(dim=1)[0].cpu())

    def reset(self):
        self.layers = []

    def remove(self):
        for handle in self._handles:
            handle.remove()
        self._handles = []

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.remove()
        return False


def pair_rows(
    layers: list[torch.Tensor],
    query_frame: int,
    ref_frame: int,
    tokens_per_frame: int,
    row_indices: list[int],
    grid: tuple[int, int],
):
    """Slice captured layers to (S, L, h, w) rows for one ordered view pair.

    ``row_indices`` are token indices within the query frame's grid,
    row-major.
    """
    h, w = grid
    rows = []
    for layer in layers:
        q0 = query_frame * tokens_per_frame
        k0 = ref_frame * tokens_per_frame
        block = layer[q0 : q0 + tokens_per_frame, k0 : k0 + tokens_per_frame]
        rows.append(block[row_indices].reshape(len(row_indices), h, w))
    stacked = torch.stack(rows, dim=1)  # S x L x h x w
    return stacked.numpy()
