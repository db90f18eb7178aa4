# Patch losses and the attention construction on toy matrices.
# Run: python demos/01_losses_and_attention.py
import torch

from ulsad.global_branch import consistency_loss, cross_attention, self_attention
from ulsad.local_branch import LossConfig, distance_d, distance_v, loss_pl

torch.manual_seed(0)
cfg = LossConfig(lambda_l=0.5, lambda_g=0.5)

# one column each: orthogonal unit vectors
a = torch.tensor([[1.0], [0.0]])
b = torch.tensor([[0.0], [1.0]])
print("squared distance    ", distance_v(a[:, 0], b[:, 0]).item())  # 2
print("cosine distance     ", distance_d(a[:, 0], b[:, 0]).item())  # 1
print("patch loss, lambda .5", loss_pl(a, b, cfg).item())  # 2 + 0.5 * 1

# a patch matrix: 4 channels, 6 patch positions
z = torch.randn(4, 6)
print("loss of a perfect reconstruction:", loss_pl(z.clone(), z, cfg).item())

# self-attention mixes the columns of z; every weight column is a distribution
att = self_attention(z)
print("weight column sums:", att.weights.sum(0))
lo, hi = z.min(1, keepdim=True).values, z.max(1, keepdim=True).values
print("attended values inside row ranges:", bool(((att.attended >= lo) & (att.attended <= hi)).all()))

# cross-attention takes its queries from a second matrix (the global branch output)
z_hat = z + 0.3 * torch.randn_like(z)
cross = cross_attention(z, z_hat)
print("cross vs self attention gap:", (cross.attended - att.attended).abs().max().item())

# the consistency loss pulls z_hat towards queries that reproduce the self-attention map
z_hat.requires_grad_(True)
opt = torch.optim.SGD([z_hat], lr=0.5)
for step in range(201):
    loss = consistency_loss(z, z_hat, cfg)
    if step % 50 == 0:
        print(f"step {step:3d}  consistency loss {loss.item():.5f}")
    opt.zero_grad()
    loss.backward()
    opt.step()
