"""Central-difference audit of every differentiable op and of the full training loss."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, finite_diff_check

TOLERANCE = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_error: float
    coords: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE

    def line(self) -> str:
        verdict = "ok" if self.passed else "FAIL"
        return f"{self.name:<28} {self.max_rel_error:.3e} coords={self.coords} {verdict}"


def _projector(rng: np.random.Generator, shape) -> Tensor:
    # Random fixed weights turn a tensor output into a scalar with a generic gradient.
    return Tensor(rng.standard_normal(shape))


def _scalarize(fn: Callable[[Tensor], Tensor], out_shape, rng) -> Callable[[Tensor], Tensor]:
    w = _projector(rng, out_shape)
    return lambda x: ad.tsum(fn(x) * w)


def _op_cases(rng: np.random.Generator) -> list[tuple[str, Callable[[Tensor], Tensor], np.ndarray]]:
    """(name, f: Tensor -> Tensor, input) for each op; f's output is projected to a scalar later."""
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    row = rng.standard_normal(4)
    m = rng.standard_normal((4, 5))
    bat = rng.standard_normal((2, 3, 4))
    bm = rng.standard_normal((2, 4, 2))
    pos = rng.uniform(0.5, 2.0, (3, 4))
    # Keep relu inputs away from the kink.
    kinkless = np.where(np.abs(a) < 0.1, a + 0.3 * np.sign(a + 1e-12), a)
    g = rng.standard_normal(4)
    beta = rng.standard_normal(4)
    img = rng.standard_normal((2, 6, 6, 2))
    kern = rng.standard_normal((3, 3, 2, 3))
    kb = rng.standard_normal(3)
    distinct = rng.permutation(12).reshape(3, 4) + rng.uniform(0, 0.1, (3, 4))
    return [
        ("add", lambda x: ad.add(x, Tensor(b)), a),
        ("add[broadcast rhs]", lambda x: ad.add(Tensor(a), x), row),
        ("sub[lhs]", lambda x: ad.sub(x, Tensor(b)), a),
        ("sub[rhs]", lambda x: ad.sub(Tensor(a), x), b),
        ("mul[lhs]", lambda x: ad.mul(x, Tensor(b)), a),
        ("mul[broadcast rhs]", lambda x: ad.mul(Tensor(a), x), row),
        ("scale", lambda x: ad.scale(x, -1.7), a),
        ("neg", ad.neg, a),
        ("sigmoid", ad.sigmoid, a),
        ("log", ad.log, pos),
        ("exp", ad.exp, a),
        ("relu", ad.relu, kinkless),
        ("softplus", ad.softplus, a),
        ("elementwise[mul]", lambda x: ad.elementwise("mul", x, x), a),
        ("matmul[lhs]", lambda x: ad.matmul(x, Tensor(m)), a),
        ("matmul[rhs]", lambda x: ad.matmul(Tensor(a), x), m),
        ("matmul[batched lhs]", lambda x: ad.matmul(x, Tensor(m)), bat),
        ("matmul[batched rhs]", lambda x: ad.matmul(Tensor(bat), x), bm),
        ("transpose", lambda x: ad.transpose(x, (2, 0, 1)), bat),
        ("swapaxes", lambda x: ad.swapaxes(x, 0, 2), bat),
        ("reshape", lambda x: ad.reshape(x, (4, 3)), a),
        ("take", lambda x: ad.take(x, [2, 0, 2, 1], axis=1), a),
        ("concat", lambda x: ad.concat([x, ad.scale(x, 2.0)], axis=1), a),
        ("sum[axis]", lambda x: ad.tsum(x, axis=1), bat),
        ("mean[axis]", lambda x: ad.mean(x, axis=0), bat),
        ("max[axis]", lambda x: ad.max_with_argmax(x, axis=1)[0], distinct),
        ("max[all]", lambda x: ad.reshape(ad.max_with_argmax(x)[0], (1,)), distinct),
        ("softmax", lambda x: ad.softmax(x, axis=-1), a),
        ("log_softmax", lambda x: ad.log_softmax(x, axis=0), a),
        ("layer_norm[input]", lambda x: ad.layer_norm(x, Tensor(g), Tensor(beta)), a),
        ("layer_norm[gain]", lambda x: ad.layer_norm(Tensor(a), x, Tensor(beta)), g),
        ("layer_norm[bias]", lambda x: ad.layer_norm(Tensor(a), Tensor(g), x), beta),
        ("conv2d[input]", lambda x: ad.conv2d(x, Tensor(kern), Tensor(kb), stride=2, padding=1), img),
        ("conv2d[weight]", lambda x: ad.conv2d(Tensor(img), x, Tensor(kb), stride=1, padding=1), kern),
        ("conv2d[bias]", lambda x: ad.conv2d(Tensor(img), Tensor(kern), x, stride=2, padding=0), kb),
    ]


def check_ops(seed: int = 0, eps: float = 1e-5) -> list[CheckResult]:
    rng = np.random.default_rng([seed, 1])
    results = []
    for name, fn, x in _op_cases(rng):
        with ad.no_grad():
            out_shape = fn(Tensor(x)).shape
        f = _scalarize(fn, out_shape, rng)
        results.append(CheckResult(name, finite_diff_check(f, x, eps), x.size))
    return results


def check_model_loss(seed: int = 0, batch: int = 2, coords_per_tensor: int = 4,
                     eps: float = 1e-5, model_config=None, train_config=None) -> list[CheckResult]:
    """Total training loss at desk dimensions, checked per parameter tensor.

    Every tensor is checked on its ``coords_per_tensor`` coordinates with the
    largest analytic gradient (all of them when the tensor is smaller).  Near
    zero the relative error measures float round-off in the loss rather than
    the gradient rule, and a gradient that is wrongly zero everywhere still
    shows up as a relative error of 1.
    """
    from .model import Model, ModelConfig
    from .training import (TrainConfig, keyed_negatives, loss_cls, loss_loc, supervision_targets,
                           total_loss)
    from .world import WorldSpec, generate_dataset

    spec = WorldSpec()
    kb = spec.knowledge_base()
    mcfg = model_config or ModelConfig()
    tcfg = train_config or TrainConfig(seed=seed)
    samples = generate_dataset(spec, batch, seed, kb)
    images = np.stack([s.image for s in samples])
    targets = [supervision_targets(s.triplets, kb) for s in samples]
    exist = np.stack([t[0] for t in targets])
    position = np.stack([t[1] for t in targets])
    model = Model(mcfg, kb, seed=seed)
    # Zero-initialized biases put ReLU inputs of blank image regions exactly on
    # the kink, where central differences see half the slope.  Jitter first.
    jitter = np.random.default_rng([seed, 3])
    for p in model.params.values():
        p.data = p.data + 0.05 * jitter.standard_normal(p.shape)
    negatives = keyed_negatives(position, kb.num_positions, tcfg.negatives, seed, 0,
                                [s.index for s in samples])
    results = []
    for name in sorted(model.params):
        base = model.params[name]

        def loss_of(x: Tensor, name=name) -> Tensor:
            params = dict(model.params)
            params[name] = x
            saved, model.params = model.params, params
            try:
                out = model.forward(images)
            finally:
                model.params = saved
            lc = loss_cls(out.exist_logits, exist)
            ll = loss_loc(out.position_preds, position, model.position_bank, negatives=negatives,
                          variant=tcfg.loc_variant)
            return total_loss(lc, ll, tcfg.alpha_loc, tcfg.alpha_cls)

        x = Tensor(base.data.copy(), requires_grad=True)
        loss_of(x).backward()
        k = min(coords_per_tensor, base.size)
        coords = np.sort(np.argsort(-np.abs(x.grad.reshape(-1)), kind="stable")[:k])
        results.append(CheckResult(f"loss wrt {name}", finite_diff_check(loss_of, base.data, eps, coords), k))
    return results


def run(seed: int = 0, coords_per_tensor: int = 4) -> tuple[list[CheckResult], float]:
    t0 = time.perf_counter()
    results = check_ops(seed) + check_model_loss(seed, coords_per_tensor=coords_per_tensor)
    return results, time.perf_counter() - t0
