# coding: utf-8

# # A tour of the tensor core
#
# Everything in `mrlf` runs on a small reverse-mode autodiff engine built on
# numpy.  A `Tensor` wraps an array; ops record their parents and a backward
# rule, and `backward(loss)` walks the record in reverse.

# In[1]:

import numpy as np

from mrlf import Tensor, backward, no_grad
from mrlf import functional as F
from mrlf.gradcheck import gradcheck
from mrlf.tensor import computation_record


# Start with something you can check by hand: d/dx of sum(x**2) is 2x.

# In[2]:

x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
loss = (x ** 2).sum()
backward(loss)
print(x.grad)  # [2. 4. 6.]


# The record lists every executed op in topological order.

# In[3]:

w = Tensor(np.eye(3), requires_grad=True)
loss = F.relu(x.reshape(1, 3) @ w).sum()
for entry in computation_record(loss):
    print(f"{entry.op:10s} -> {entry.output.shape}")


# Convolution is cross-correlation with zero "same" padding.  An edge
# detector on [1, 2, 3]:

# In[4]:

out = F.conv1d(Tensor([[1.0, 2.0, 3.0]]), Tensor([[[1.0, 0.0, -1.0]]]), Tensor([0.0]))
print(out.data)  # [[-2. -2.  2.]]


# Pooling windows may overlap.  Window 3, stride 2:

# In[5]:

print(F.maxpool1d(Tensor([[3.0, 1.0, 4.0, 1.0, 5.0]]), window=3, stride=2).data)  # [[4. 5.]]


# ## Checking gradients
#
# `gradcheck` compares autodiff with central finite differences.  Here it
# runs over a small attention block.

# In[6]:

rng = np.random.default_rng(0)
q, k, v = (Tensor(rng.normal(size=(4, 6)), requires_grad=True) for _ in range(3))
weights = rng.normal(size=(4, 6))
err = gradcheck(lambda: (F.attention(q, k, v) * weights).sum(), [q, k, v])
print(f"max relative error {err:.2e}")


# Inside `no_grad` nothing is recorded, which is what evaluation uses.

# In[7]:

with no_grad():
    y = x * 3.0
print(y.requires_grad)  # False
