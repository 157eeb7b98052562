"""
A tour of the Deep WaveNet architecture
=======================================

Builds the default network and its ablation variants, pushes a random
batch through each stage and prints the tensor shapes along the way.
"""

import torch

from deepwavenet.model import DeepWaveNet, ModelConfig, Variant, count_parameters, pixel_shuffle, serialized_size

torch.manual_seed(0)
d = torch.rand(2, 3, 48, 64)

# The default configuration: three colour branches with 3x3 / 5x5 / 7x7
# kernels for red / green / blue, attention on every skip connection.
model = DeepWaveNet().eval()
print(f"default: {count_parameters(model):,} parameters, {serialized_size(model) / 1e6:.2f} MB on disk")

# Stage by stage.
f1 = model.stage1_features(d)
m1 = torch.cat(f1, dim=1)
m2 = torch.cat(model.stage2_features(m1, f1), dim=1)
m3 = model.stage3_residual(m2, d)
e = model.stage4_reconstruct(m3)
for name, t in [("stage 1", m1), ("stage 2", m2), ("stage 3 residual", m3), ("stage 4", e)]:
    print(f"{name:>18}: {tuple(t.shape)}")

# Super-resolution only changes the width of the last layer: 3*s*s channels
# which pixel shuffle rearranges into an s-times larger image.
for s in (2, 3, 4):
    sr = DeepWaveNet(ModelConfig(scale_factor=s)).eval()
    with torch.no_grad():
        print(f"scale {s}: {tuple(d.shape)} -> {tuple(sr(d).shape)}")

# Pixel shuffle on a tiny tensor, to see where each channel lands.
x = torch.arange(12.0).reshape(1, 12, 1, 1)
print(pixel_shuffle(x, 2)[0])

# The ablation variants differ only in kernels, attention and how stage 1
# sees the input.
for v in Variant:
    m = DeepWaveNet(ModelConfig(variant=v))
    print(f"{v.value:>10}: kernels {v.kernel_sizes}, cbam={v.uses_cbam}, {count_parameters(m):,} parameters")
