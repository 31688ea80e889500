"""Central finite differences on shrunken double-precision replicas."""
import numpy as np
import torch

from posetransfer.losses import LossWeights, ScaleLogits, scale_logits, stage1_loss, stage2_loss
from posetransfer.networks import Discriminator, GeneratorG1, GeneratorG2, merge

SIZE = (8, 8)
STEP = 1e-6
MARGIN = 1e-3


def sample_coords(tensors, per_tensor, rng):
    coords = []
    for t in tensors:
        n = t.numel()
        for i in rng.choice(n, size=min(per_tensor, n), replace=False):
            coords.append((t, int(i)))
    return coords


@torch.no_grad()
def numeric_grad(fn, coords, h=STEP):
    out = []
    for t, i in coords:
        flat = t.data.view(-1)
        old = flat[i].item()
        flat[i] = old + h
        up = fn().item()
        flat[i] = old - h
        down = fn().item()
        flat[i] = old
        out.append((up - down) / (2 * h))
    return np.array(out)


def analytic_grad(fn, coords):
    tensors = list({id(t): t for t, _ in coords}.values())
    grads = torch.autograd.grad(fn(), tensors, allow_unused=True)
    by_id = {id(t): (g if g is not None else torch.zeros_like(t)) for t, g in zip(tensors, grads)}
    return np.array([by_id[id(t)].reshape(-1)[i].item() for t, i in coords])


def relative_error(fn, coords):
    a = analytic_grad(fn, coords)
    n = numeric_grad(fn, coords)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    assert scale > 0, "gradient vanished at every sampled coordinate"
    return float(np.linalg.norm(a - n) / scale)


def _inputs(seed, batch=4):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(batch, 3, *SIZE, generator=g, dtype=torch.float64) * 1.6 - 0.8
    p = torch.rand(batch, 18, *SIZE, generator=g, dtype=torch.float64)
    y = torch.rand(batch, 3, *SIZE, generator=g, dtype=torch.float64) * 1.6 - 0.8
    m = (torch.rand(batch, 1, *SIZE, generator=g) < 0.5).double()
    return x, p, y, m


def _away_from_kinks(y, pre_clamp):
    """Target nudged so every ``|y - y_hat|`` clears ``MARGIN``.

    ``pre_clamp`` is the unclamped generator output; it must not sit on a
    clamp boundary either.
    """
    assert ((pre_clamp.abs() - 1).abs() > MARGIN).all(), "output on a clamp boundary"
    y_hat = pre_clamp.clamp(-1, 1)
    d = y - y_hat
    sign = torch.where(d >= 0, 1.0, -1.0).to(y.dtype)
    return torch.where(d.abs() < 10 * MARGIN, y_hat + 10 * MARGIN * sign, y)


@torch.no_grad()
def _spread(net, scale=1.0):
    """Fan-in scaled weights and nonzero biases.

    With the small training init and zero biases, narrow replicas carry
    activations of ~1e-5 and pre-activations sitting exactly at the ReLU
    kink, where no finite difference is meaningful.  Gradients do not
    depend on where the weights come from, so the replicas use O(1) ones.
    This also replaces the zero-initialised G2 head, which would otherwise
    hide every upstream G2 gradient.
    """
    for m in net.modules():
        if isinstance(m, (torch.nn.Conv2d, torch.nn.ConvTranspose2d, torch.nn.Linear)):
            fan_in = m.weight[0].numel() if not isinstance(m, torch.nn.ConvTranspose2d) \
                else m.weight.shape[0] * m.weight[0, 0].numel()
            m.weight.normal_(0, scale / fan_in ** 0.5)
            m.bias.uniform_(-0.2, 0.2)
    return net


def replicas(seed=0):
    torch.manual_seed(seed)
    g1 = _spread(GeneratorG1("market", SIZE, width_divisor=64).double())
    g2 = _spread(GeneratorG2("market", SIZE, width_divisor=64).double(), 0.5)
    d1 = _spread(Discriminator("market", SIZE, width_divisor=64, n_layers=2).double())
    d2 = _spread(Discriminator("market", (SIZE[0] // 2, SIZE[1] // 2), width_divisor=64, n_layers=2).double())
    return g1, g2, d1, d2


def stage1_error(seed=0, per_tensor=3):
    rng = np.random.default_rng(seed)
    g1, *_ = replicas(seed)
    x, p, y, m = _inputs(seed)
    with torch.no_grad():
        y = _away_from_kinks(y, g1(x, p))
    x.requires_grad_(True)
    fn = lambda: stage1_loss(y, g1(x, p), m, LossWeights(lambda_bg1=1.5))[0]
    coords = sample_coords([*g1.parameters(), x], per_tensor, rng)
    return relative_error(fn, coords)


def stage2_errors(seed=0, adversarial=True, per_tensor=3):
    """``{"g": err wrt G2 params, "d": err wrt D1/D2 params (adversarial only)}``."""
    rng = np.random.default_rng(seed)
    g1, g2, d1, d2 = replicas(seed)
    x, p, y, m = _inputs(seed)
    w = LossWeights() if adversarial else LossWeights(lambda_d1=0, lambda_d2=0)
    with torch.no_grad():
        y1 = g1(x, p)
        y = _away_from_kinks(y, y1 + g2(x, y1))

    def g_total():
        y_hat = merge(y1, g2(x, y1))
        full, half = scale_logits(d1, d2, x, y, y_hat)
        return stage2_loss(full, half, y, y_hat, m, w)[0]

    with torch.no_grad():
        fixed = merge(y1, g2(x, y1))

    def d_total():
        full, half = scale_logits(d1, d2, x, y, fixed)
        return stage2_loss(full, half, y, fixed, m, w)[1]

    out = {"g": relative_error(g_total, sample_coords(list(g2.parameters()), per_tensor, rng))}
    if adversarial:
        d_params = [*d1.parameters(), *d2.parameters()]
        out["d"] = relative_error(d_total, sample_coords(d_params, per_tensor, rng))
    return out


def gan_loss_errors(seed=0):
    from posetransfer.losses import cgan_d_loss, cgan_g_loss, multiscale_gan_objective

    g = torch.Generator().manual_seed(seed)
    logits = [torch.randn(5, generator=g, dtype=torch.float64) * 3 for _ in range(4)]
    full, half = ScaleLogits(*logits[:2]), ScaleLogits(*logits[2:])
    w = LossWeights(lambda_d1=0.7, lambda_d2=1.3)
    fns = {
        "d": lambda: cgan_d_loss(full.real, full.fake),
        "d_smoothed": lambda: cgan_d_loss(full.real, full.fake, real_label=0.9),
        "g": lambda: cgan_g_loss(full.fake),
        "multiscale_g": lambda: multiscale_gan_objective(full, half, w)[0],
        "multiscale_d": lambda: multiscale_gan_objective(full, half, w)[1],
    }
    out = {}
    for name, fn in fns.items():
        for t in logits:
            t.requires_grad_(True)
        coords = [(t, i) for t in logits for i in range(t.numel())]
        out[name] = relative_error(fn, coords)
    return out
