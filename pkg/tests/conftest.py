import numpy as np
import pytest

from aptnet.model import ModelConfig
from aptnet.tensor import precision


@pytest.fixture(autouse=True)
def float64_run():
    with precision("float64"):
        yield


@pytest.fixture
def tiny_cfg():
    return ModelConfig(dim=2, d_a=2, d_z=1, scalar_names=("rate",), d_h=8, n_heads=2, n_supernodes=4, n_latent=2,
                       n_enc=1, n_app=1, n_dec=1, mlp_ratio=2, grid_size=4, radius=80.0, seed=3)


def perturb(model, scale=0.3, seed=0):
    """Give every parameter (including the zero-initialized ones) a random offset."""
    rng = np.random.default_rng(seed)
    for _, p in model.named_parameters():
        p.data = p.data + rng.normal(scale=scale, size=p.shape)
    return model


def numeric_grad(f, arr, h=1e-6):
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def brute_attention(mha, q_in, kv_in):
    """Dense per-head evaluation, output projection included."""
    q = q_in @ mha.q.weight.data + mha.q.bias.data
    k = kv_in @ mha.k.weight.data + mha.k.bias.data
    v = kv_in @ mha.v.weight.data + mha.v.bias.data
    h = mha.n_heads
    dh = q.shape[-1] // h
    heads = []
    for j in range(h):
        s = slice(j * dh, (j + 1) * dh)
        logits = q[:, s] @ k[:, s].T / np.sqrt(dh)
        w = np.exp(logits - logits.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        heads.append(w @ v[:, s])
    return np.concatenate(heads, axis=1) @ mha.o.weight.data + mha.o.bias.data


def np_layer_norm(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def np_mlp(mlp, x):
    h = x @ mlp.fc1.weight.data + mlp.fc1.bias.data
    h = 0.5 * h * (1 + np.tanh(np.sqrt(2 / np.pi) * (h + 0.044715 * h**3)))
    return h @ mlp.fc2.weight.data + mlp.fc2.bias.data


def np_dit(blk, x, cond, context=None):
    """Dense reference for one (cross-)DiT block on unbatched (N, d) tokens and a (d_e,) condition."""
    c = cond * (1 / (1 + np.exp(-cond)))
    mod = c @ blk.ada.weight.data + blk.ada.bias.data
    sa, ca, ga, sm, cm, gm = np.split(mod, 6)
    h = np_layer_norm(x) * (1 + ca) + sa
    kv = h if context is None else np_layer_norm(context)
    x = x + ga * brute_attention(blk.attn, h, kv)
    h = np_layer_norm(x) * (1 + cm) + sm
    return x + gm * np_mlp(blk.mlp, h)


def loss_gradient_errors(model, n_points=12, batch=2, seed=0, h=1e-5):
    """Per-parameter relative error of backprop vs central differences for the relative loss.

    The error of a parameter tensor is ``|g - g_fd| / max(|g|, |g_fd|, 1e-6)``
    in the Euclidean norm; the floor keeps tensors whose exact gradient is
    zero (the key bias, by softmax shift invariance) from dividing noise by noise.
    """
    from aptnet.training import relative_lp_loss
    from aptnet.tensor import Tensor

    rng = np.random.default_rng(seed)
    cfg = model.cfg
    coords = rng.uniform(0, cfg.extent, size=(batch, n_points, cfg.dim))
    feats = rng.normal(size=(batch, n_points, cfg.d_a))
    t = rng.uniform(size=batch)
    scalars = {k: rng.normal(size=batch) for k in cfg.scalar_names}
    target = Tensor(rng.normal(size=(batch, n_points, cfg.d_z)))

    def loss():
        return relative_lp_loss(model(coords, feats, t, scalars, seeds=[1] * batch), target)

    model.zero_grad()
    loss().backward()
    errors = {}
    for name, p in model.named_parameters():
        num = numeric_grad(lambda: float(loss().data), p.data, h)
        a = p.grad if p.grad is not None else np.zeros_like(p.data)
        errors[name] = np.linalg.norm(a - num) / max(np.linalg.norm(a), np.linalg.norm(num), 1e-6)
    return errors


def kernel_error(n, t0=0.002, t1=0.006, kappa=1.0):
    """Rel-L2 error of the oracle against the heat kernel on an ``n x n`` grid.

    The grid is initialized with the kernel at ``t0`` (a point release that
    has already spread over a few cells) and advanced to ``t1`` with
    ``dt = h^2 / 2``; both times are early enough that the walls are not felt.
    """
    from aptnet.datagen import DiffusionScenario, heat_kernel, solve_diffusion

    c = (np.arange(n) + 0.5) / n
    x, y = np.meshgrid(c, c, indexing="ij")
    dt = 0.5 / n**2
    steps = int(round((t1 - t0) / dt))
    scen = DiffusionScenario(np.full((n, n), kappa), heat_kernel(x, y, t0, kappa), dt, [steps])
    got = solve_diffusion(scen).fields[-1]
    exact = heat_kernel(x, y, t0 + steps * dt, kappa)
    return float(np.linalg.norm(got - exact) / np.linalg.norm(exact))


# -- acceptance reporting -------------------------------------------------

CRITERIA = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records and prints one verdict line."""

    def record(n, ok, detail):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        CRITERIA[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    for rep in terminalreporter.stats.get("failed", []) + terminalreporter.stats.get("error", []):
        name = rep.nodeid.rsplit("::", 1)[-1]
        if name.startswith("test_criterion_"):
            n = int(name.split("_")[2])
            CRITERIA.setdefault(n, f"criterion {n:>2}: FAIL  (raised before reporting: {rep.nodeid})")
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
