"""
Channel attention on fused features
===================================

The fusion block concatenates the 3D and 2D feature maps along channels,
builds the Gram matrix of the vectorised channels and mixes every channel
with a softmax-weighted sum of all channels. A learnable scalar scales the
mixed features before they are added back, and it starts at zero.
"""

import numpy as np

from actionloc.cfam import CFAM, attention_map, gram
from actionloc.tensor import Tensor, precision

rng = np.random.default_rng(0)

###############################################################################
# Gram matrix and attention map on a tiny feature map.

B = rng.normal(size=(4, 3, 3))
F = Tensor(B.reshape(4, 9))
G = gram(F).data
M = attention_map(Tensor(G)).data
print(np.round(G, 2))
print("symmetric:", np.allclose(G, G.T), "row sums:", M.sum(axis=1))

###############################################################################
# With alpha at its initial value of 0 the block is the identity on its
# input, so training starts from plain concatenation.

with precision("double"):
    cf = CFAM(4, 4, mid_channels=4)
    out = cf.attend(Tensor(B[None])).data[0]
    print("alpha=0 identity:", np.array_equal(out, B))
    cf.alpha.data = np.asarray(0.5)
    out = cf.attend(Tensor(B[None])).data[0]
    print("alpha=0.5 changes:", np.abs(out - B).max())

###############################################################################
# Permuting channels permutes the output the same way.

p = rng.permutation(4)
with precision("double"):
    a = cf.attend(Tensor(B[None])).data[0]
    b = cf.attend(Tensor(B[p][None])).data[0]
print("equivariant:", np.allclose(a[p], b))
