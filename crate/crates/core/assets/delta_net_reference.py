import torch
import torch.nn as nn
import torch.nn.functional as F


class DeltaNet(nn.Module):
    """Delta-rule linear attention layer, chunk-free reference form."""

    def __init__(self, hidden_size=256, num_heads=8, **kwargs):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = hidden_size // num_heads
        self.q_proj = nn.Linear(hidden_size, hidden_size, bias=False)
        self.k_proj = nn.Linear(hidden_size, hidden_size, bias=False)
        self.v_proj = nn.Linear(hidden_size, hidden_size, bias=False)
        self.b_proj = nn.Linear(hidden_size, num_heads, bias=False)
        self.o_proj = nn.Linear(hidden_size, hidden_size, bias=False)

    def forward(self, x, **kwargs):
        b, t, _ = x.shape
        h, d = self.num_heads, self.head_dim
        q = F.silu(self.q_proj(x)).view(b, t, h, d)
        k = F.normalize(F.silu(self.k_proj(x)).view(b, t, h, d), dim=-1)
        v = F.silu(self.v_proj(x)).view(b, t, h, d)
        beta = torch.sigmoid(self.b_proj(x))
        state = x.new_zeros(b, h, d, d)
        out = []
        for i in range(t):
            ki, vi, qi = k[:, i], v[:, i], q[:, i]
            pred = torch.einsum("bhd,bhde->bhe", ki, state)
            delta = (vi - pred) * beta[:, i, :, None]
            state = state + torch.einsum("bhd,bhe->bhde", ki, delta)
            out.append(torch.einsum("bhd,bhde->bhe", qi, state))
        o = torch.stack(out, dim=1).reshape(b, t, h * d)
        return self.o_proj(o)
