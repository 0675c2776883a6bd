"""Order-independent reductions over the word axis.

Sorting before summation makes softmax denominators and L1 norms invariant to
the order of the visual words, so permuting a vocabulary permutes outputs
bit for bit.
"""
import torch


def ordered_sum(x: torch.Tensor, dim: int = -1, keepdim: bool = False) -> torch.Tensor:
    return torch.sort(x, dim=dim).values.sum(dim=dim, keepdim=keepdim)


def softmax(logits: torch.Tensor, dim: int = -1) -> torch.Tensor:
    z = logits - logits.max(dim=dim, keepdim=True).values.detach()
    e = z.exp()
    return e / ordered_sum(e, dim=dim, keepdim=True)
