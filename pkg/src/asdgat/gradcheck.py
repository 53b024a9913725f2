"""Central finite-difference oracle for the autodiff engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class NonDeterministicError(RuntimeError):
    pass


def _scalar(f, inputs) -> float:
    out = f(*inputs)
    if out.data.size != 1:
        raise ad.ShapeError("finite_difference_check needs a scalar-valued function")
    return float(out.data.reshape(()))


def finite_difference_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    eps: float = 1e-5,
) -> float:
    """Compare reverse-mode gradients of ``f`` with central differences.

    ``x`` may be a single tensor or a sequence of tensors passed positionally.
    Every input is perturbed in place, one coordinate at a time, and restored.

    Returns:
        max over coordinates of ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    inputs = [x] if isinstance(x, Tensor) else list(x)
    for t in inputs:
        t.requires_grad = True
        t.grad = None

    f0 = _scalar(f, inputs)
    if _scalar(f, inputs) != f0:
        raise NonDeterministicError("two forward passes disagree")
    out = f(*inputs)
    out.backward()
    analytic = [ad.grad_of(t).copy() for t in inputs]

    worst = 0.0
    for t, g_ad in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        g_flat = g_ad.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            up = _scalar(f, inputs)
            flat[k] = orig - eps
            down = _scalar(f, inputs)
            flat[k] = orig
            g_fd = (up - down) / (2 * eps)
            err = abs(g_flat[k] - g_fd) / max(1.0, abs(g_flat[k]), abs(g_fd))
            worst = max(worst, err)
    return worst


def _away_from(x: np.ndarray, points: Sequence[float], rng, margin: float = 1e-3) -> np.ndarray:
    """Resample entries lying within ``margin`` of any kink point."""
    x = x.copy()
    for _ in range(100):
        bad = np.zeros(x.shape, dtype=bool)
        for p in points:
            bad |= np.abs(x - p) < margin
        if not bad.any():
            break
        x[bad] = rng.uniform(-2, 2, size=int(bad.sum()))
    return x


def _distinct(x: np.ndarray, rng, margin: float = 1e-3) -> np.ndarray:
    """Resample until no two entries tie within ``margin`` (for max)."""
    x = x.copy()
    for _ in range(100):
        flat = np.sort(x.reshape(-1))
        if flat.size < 2 or np.min(np.diff(flat)) >= margin:
            break
        x = rng.uniform(-2, 2, size=x.shape)
    return x


def primitive_cases(seed: int) -> dict[str, tuple[Callable[..., Tensor], list[Tensor]]]:
    """Scalarised test functions for every primitive, with inputs in [-2, 2]."""
    rng = np.random.default_rng(seed)

    def u(*shape):
        return rng.uniform(-2, 2, size=shape)

    def t(a):
        return Tensor(a, requires_grad=True)

    # fixed random weights turn each output into a scalar without symmetry
    def proj(shape):
        w = rng.normal(size=shape)
        return lambda out: ad.sum(ad.multiply(out, Tensor(w)))

    seg = np.array([0, 0, 1, 2, 2, 2])
    cases = {}
    p = proj((3, 2))
    cases["matmul"] = (lambda a, b, p=p: p(ad.matmul(a, b)), [t(u(3, 4)), t(u(4, 2))])
    p = proj((3, 4))
    cases["add"] = (lambda a, b, p=p: p(ad.add(a, b)), [t(u(3, 4)), t(u(3, 4))])
    cases["add_row"] = (lambda a, b, p=p: p(ad.add(a, b)), [t(u(3, 4)), t(u(1, 4))])
    cases["multiply"] = (lambda a, b, p=p: p(ad.multiply(a, b)), [t(u(3, 4)), t(u(3, 4))])
    cases["multiply_col"] = (lambda a, b, p=p: p(ad.multiply(a, b)), [t(u(3, 4)), t(u(3, 1))])
    cases["scale"] = (lambda a, p=p: p(ad.scale(a, -1.7)), [t(u(3, 4))])
    p5 = proj((3, 5))
    cases["concat"] = (lambda a, b, p=p5: p(ad.concat([a, b], axis=1)), [t(u(3, 2)), t(u(3, 3))])
    cases["exp"] = (lambda a, p=p: p(ad.exp(a)), [t(u(3, 4))])
    cases["log"] = (lambda a, p=p: p(ad.log(a)), [t(rng.uniform(0.2, 2, size=(3, 4)))])
    p_r = proj((4,))
    cases["sum"] = (lambda a, p=p_r: p(ad.sum(a, axis=0)), [t(u(3, 4))])
    cases["mean"] = (lambda a, p=p_r: p(ad.mean(a, axis=0)), [t(u(3, 4))])
    cases["max"] = (lambda a, p=p_r: p(ad.max(a, axis=0)), [t(_distinct(u(3, 4), rng))])
    pt = proj((4, 3))
    cases["transpose"] = (lambda a, p=pt: p(ad.transpose(a)), [t(u(3, 4))])
    pg = proj((5, 4))
    cases["gather_rows"] = (lambda a, p=pg: p(ad.gather_rows(a, [0, 2, 2, 1, 0])), [t(u(3, 4))])
    ps = proj((3, 4))
    cases["scatter_add_rows"] = (
        lambda a, p=ps: p(ad.scatter_add_rows(a, [0, 2, 2, 1, 0], 3)),
        [t(u(5, 4))],
    )
    cases["relu"] = (lambda a, p=p: p(ad.relu(a)), [t(_away_from(u(3, 4), [0.0], rng))])
    cases["elu"] = (lambda a, p=p: p(ad.elu(a)), [t(_away_from(u(3, 4), [0.0], rng))])
    cases["leaky_relu"] = (lambda a, p=p: p(ad.leaky_relu(a, 0.2)), [t(_away_from(u(3, 4), [0.0], rng))])
    pseg = proj((6, 2))
    cases["segment_softmax"] = (lambda a, p=pseg: p(ad.segment_softmax(a, seg, 3)), [t(u(6, 2))])
    cases["log_softmax"] = (lambda a, p=p: p(ad.log_softmax(a, axis=1)), [t(u(3, 4))])
    pre = proj((2, 6))
    cases["reshape"] = (lambda a, p=pre: p(ad.reshape(a, (2, 6))), [t(u(3, 4))])
    return cases


def primitive_suite(seeds=range(10), eps: float = 1e-5) -> dict[str, float]:
    """Worst relative error per primitive over the given seeds."""
    worst: dict[str, float] = {}
    for seed in seeds:
        for name, (f, inputs) in primitive_cases(seed).items():
            err = finite_difference_check(f, inputs, eps)
            worst[name] = max(worst.get(name, 0.0), err)
    return worst


def classifier_check(kind: str = "gat", seed: int = 0, n_nodes: int = 5, eps: float = 1e-5) -> float:
    """Finite-difference check of every parameter of a 7-block classifier.

    Two random ``n_nodes``-node graphs form the batch. Batch norm runs in eval
    mode with randomised running statistics so that the two graphs do not
    couple through batch statistics.
    """
    from .connectome import BrainGraph
    from .nn.models import GraphClassifier, ModelConfig
    from .train import nll_loss

    rng = np.random.default_rng(seed)
    graphs = []
    for k in range(2):
        iu, ju = np.triu_indices(n_nodes, k=1)
        keep = rng.random(iu.size) < 0.5
        edges = np.stack([iu[keep], ju[keep]], axis=1)
        graphs.append(BrainGraph(f"g{k}", k, rng.normal(size=(n_nodes, 4)), edges, np.ones(keep.sum()),
                                 [str(i) for i in range(n_nodes)]))
    config = ModelConfig(kind=kind, in_dim=4, heads=2, head_width=3, n_blocks=7, fc_width=4)
    model = GraphClassifier(config, rng)
    for bn in model.norms:
        bn.running_mean = rng.normal(scale=0.3, size=config.width)
        bn.running_var = rng.uniform(0.5, 2.0, size=config.width)
    for name, p in model.params.items():
        if name.endswith(("bn.gamma", "bn.beta", "fc1.b", "fc2.b")):
            p.data = p.data + rng.normal(scale=0.3, size=p.shape)
    labels = np.array([g.label for g in graphs])

    def loss(*_):
        return nll_loss(model(graphs).log_probs, labels)

    return finite_difference_check(loss, list(model.params.values()), eps)
