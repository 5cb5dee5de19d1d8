import numpy as np

from altseg import kernels as K
from altseg import ops
from altseg.tensor import Tensor, grad_check, softmax, cross_entropy, mse

print("backend:", K.BACKEND)
rng = np.random.default_rng(0)

# conv grad
x = rng.standard_normal((3, 7, 6))
w = rng.standard_normal((4, 3, 3, 3)) * 0.3
b = rng.standard_normal(4) * 0.1
err = grad_check(lambda xt, wt, bt: mse(ops.conv2d(xt, wt, bt, stride=2), Tensor(np.zeros((4, 4, 3)))),
                 [Tensor(x), Tensor(w), Tensor(b)])
print("conv stride2 grad err", err)

# grouped conv
w2 = rng.standard_normal((4, 1, 3, 3)) * 0.3
err = grad_check(lambda xt, wt: mse(ops.conv2d(xt, wt, None, groups=4),
                                    Tensor(np.zeros((4, 7, 6)))),
                 [Tensor(rng.standard_normal((4, 7, 6))), Tensor(w2)])
print("grouped conv grad err", err)

# bilinear
err = grad_check(lambda xt: mse(ops.bilinear_resize(xt, 9, 5), Tensor(np.zeros((2, 9, 5)))),
                 [Tensor(rng.standard_normal((2, 6, 7)))])
print("bilinear grad err", err)

# bilinear identity + constant
xi = rng.standard_normal((2, 5, 5))
assert np.array_equal(ops.bilinear_resize(Tensor(xi), 5, 5).data, xi)
const = np.full((1, 4, 6), 3.25)
up = ops.bilinear_resize(Tensor(const), 9, 13).data
assert np.array_equal(up, np.full((1, 9, 13), 3.25)), up.max()

# warp
mv = rng.integers(-2, 3, size=(2, 6, 5))
err = grad_check(lambda ft: mse(ops.warp(ft, mv), Tensor(np.zeros((3, 6, 5)))),
                 [Tensor(rng.standard_normal((3, 6, 5)))])
print("warp grad err", err)

# local attention
v = rng.standard_normal((3, 5, 4))
kk = rng.standard_normal((3, 5, 4))
q = rng.standard_normal((3, 5, 4))
err = grad_check(lambda a, bb, c: mse(ops.local_attention(a, bb, c, 3, 1 / np.sqrt(3)),
                                      Tensor(np.zeros((3, 5, 4)))),
                 [Tensor(v), Tensor(kk), Tensor(q)])
print("local attn grad err", err)

# global attention
vc = rng.standard_normal((3, 6))
kc = rng.standard_normal((3, 6))
err = grad_check(lambda a, bb, c: mse(ops.global_attention(a, bb, c, 0.5),
                                      Tensor(np.zeros((3, 5, 4)))),
                 [Tensor(vc), Tensor(kc), Tensor(q)])
print("global attn grad err", err)

# avg_pool ragged
err = grad_check(lambda a: mse(ops.avg_pool(a, 3), Tensor(np.zeros((2, 3, 2)))),
                 [Tensor(rng.standard_normal((2, 7, 5)))])
print("avg_pool grad err", err)

# softmax example from notes: scores (2,0) -> (0.8808, 0.1192)
sm = softmax(Tensor(np.array([2.0, 0.0])), axis=0).data
print("softmax example", np.round(sm, 4))

# cross entropy grad
logits = rng.standard_normal((3, 4, 4))
labels = rng.integers(0, 3, size=(4, 4))
labels[0, 0] = -1
err = grad_check(lambda lt: cross_entropy(lt, labels), [Tensor(logits)])
print("ce grad err", err)

# softmax shift invariance
a = rng.standard_normal((4, 3))
s1 = softmax(Tensor(a), axis=0, scale=2.0).data
s2 = softmax(Tensor(a + 7.5), axis=0, scale=2.0).data
print("shift invariance max diff", np.abs(s1 - s2).max())

# chained: conv -> attention -> ce + mse
def chain(xt, wt, wq):
    f = ops.conv2d(xt, wt, None)
    o = ops.local_attention(f, f, ops.conv2d(f, wq, None, groups=4), 3, 0.5)
    return cross_entropy(o, np.zeros((6, 5), dtype=int)) + mse(o, Tensor(np.zeros((4, 6, 5))))

err = grad_check(chain, [Tensor(rng.standard_normal((2, 6, 5))),
                         Tensor(rng.standard_normal((4, 2, 3, 3)) * 0.4),
                         Tensor(rng.standard_normal((4, 1, 3, 3)) * 0.4)])
print("chain grad err", err)
print("OK")
