# coding: utf-8

# # Top-1 routing, masking, and collapsing a layer
#
# A sparse layer sends each token to one expert. Here we build a small layer,
# look at its gate values, switch experts off, and finally rewrite a layer
# with a single surviving expert as a plain feed-forward block.

# In[1]:

import numpy as np

from moeprune.autograd import Tensor
from moeprune.model import FFN, MoELayer, collapse_to_dense, gate, moe_forward

rng = np.random.default_rng(0)
H, INNER, E = 8, 16, 4


def expert():
    return FFN(Tensor(rng.normal(size=(H, INNER)) * 0.3), Tensor(np.zeros(INNER)),
               Tensor(rng.normal(size=(INNER, H)) * 0.3), Tensor(np.zeros(H)))


layer = MoELayer(Tensor(rng.normal(size=(H, E))), [expert() for _ in range(E)])
x = Tensor(rng.normal(size=(6, H)))


# Gate values are a softmax over the router logits; every row sums to one and
# the chosen expert is the argmax.

# In[2]:

g = gate(x, layer)
print(np.round(g.alphas.data, 3))
print("chosen:", g.top1)


# Switch two experts off. Their gate values become exactly zero and the
# softmax renormalises over the rest.

# In[3]:

layer.set_survivors([0, 3])
g = gate(x, layer)
print(np.round(g.alphas.data, 3))
print("row sums:", g.alphas.data.sum(axis=1))


# With a single survivor the gate is identically one, so the layer is just
# that expert. Collapsing removes the router and gives the same numbers.

# In[4]:

layer.set_survivors([3])
masked, _ = moe_forward(x, layer)
dense = collapse_to_dense(layer)(x)
print("max difference:", np.abs(masked.data - dense.data).max())
