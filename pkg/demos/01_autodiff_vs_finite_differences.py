"""Check the reverse-mode gradients against central finite differences.

Builds a small composite expression and a real pair-training loss, runs
backward once, then wiggles a few parameters by hand.
"""

import numpy as np

from pqgen import model as M
from pqgen import tensor as T
from pqgen import training as TR

rng = np.random.default_rng(0)

# A composite expression: layer_norm(x @ w + b) pooled and dotted.
x = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
w = T.Tensor(rng.normal(size=(4, 4)), requires_grad=True)
gain = T.Tensor(np.ones(4), requires_grad=True)
bias = T.Tensor(np.zeros(4), requires_grad=True)
probe = T.Tensor(rng.normal(size=4))

T.reset_tape()
out = T.layer_norm(T.matmul(x, w), gain, bias)
loss = T.tsum(T.mul(T.mean_pool_sequence(out, [True, True, False]), probe))
T.backward(loss)

h = 1e-6
worst = 0.0
for t in (x, w, gain, bias):
    flat = t.data.reshape(-1)
    grad = t.grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        with T.no_grad():
            up = T.tsum(T.mul(T.mean_pool_sequence(
                T.layer_norm(T.matmul(x, w), gain, bias),
                [True, True, False]), probe)).item()
        flat[i] = orig - h
        with T.no_grad():
            down = T.tsum(T.mul(T.mean_pool_sequence(
                T.layer_norm(T.matmul(x, w), gain, bias),
                [True, True, False]), probe)).item()
        flat[i] = orig
        fd = (up - down) / (2 * h)
        worst = max(worst, abs(grad[i] - fd))
print(f"composite expression: worst |analytic - fd| = {worst:.3e}")

# Same drill on the full pair loss of a toy transformer.
cfg = M.ModelConfig(vocab_size=20, d_model=8, n_heads=2, n_enc_layers=1,
                    n_dec_layers=1, d_ff=16, max_len=16)
params = M.init_params(cfg, seed=0)
trip = TR.Triplet("toy", (4, 7, 9, 12), (5, 8, 11), (6, 10, 13))

T.reset_tape()
_, total = TR.ltd_loss(params, trip, lambda_div=0.1)
T.backward(total)

worst = 0.0
for name in ("tok_emb", "enc0.self.wq", "dec0.cross.wv", "cg_head.w"):
    tensor = params[name]
    flat = tensor.data.reshape(-1)
    for i in rng.choice(flat.size, size=8, replace=False):
        orig = flat[i]
        flat[i] = orig + h
        with T.no_grad():
            up = TR.ltd_loss(params, trip, 0.1)[1].item()
        flat[i] = orig - h
        with T.no_grad():
            down = TR.ltd_loss(params, trip, 0.1)[1].item()
        flat[i] = orig
        fd = (up - down) / (2 * h)
        worst = max(worst, abs(tensor.grad.reshape(-1)[i] - fd))
print(f"pair loss, 32 sampled parameters: worst |analytic - fd| = {worst:.3e}")
