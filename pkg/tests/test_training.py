import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from entalign import autodiff as ad
from entalign.autodiff import Tensor, finite_diff_check
from entalign.model import Model, ModelConfig
from entalign.reports import ExistLabel, Triplet
from entalign.runs import stack_targets
from entalign.training import (
    NO_POSITION,
    UNMENTIONED,
    AdamW,
    EpochRecord,
    TrainConfig,
    keyed_negatives,
    learning_rate,
    loss_cls,
    loss_loc,
    sample_negatives,
    supervision_targets,
    total_loss,
    train,
)

M_ = UNMENTIONED


# --- straight-line oracles (no autodiff) -------------------------------------

def bce_oracle(logits, targets):
    per_sample = []
    for row_x, row_y in zip(logits, targets):
        terms = []
        for x, y in zip(row_x, row_y):
            if y in (0, 1):
                # -log sigmoid(z) without forming 1 - p
                z = x if y == 1 else -x
                terms.append(math.log1p(math.exp(-z)) if z >= 0 else -z + math.log1p(math.exp(z)))
        per_sample.append(sum(terms) / len(terms) if terms else 0.0)
    return sum(per_sample) / len(per_sample)


def loc_oracle(preds, targets, bank, negatives, variant):
    per_sample = []
    for b in range(len(targets)):
        terms = []
        for q, pos in enumerate(targets[b]):
            if pos < 0:
                continue
            dot = lambda j: sum(preds[b][q][k] * bank[j][k] for k in range(len(bank[j])))
            num = math.exp(dot(pos))
            den = num + sum(math.exp(dot(j)) for j in negatives[b][q])
            terms.append(-math.log(num / den) if variant == "log" else -num / den)
        per_sample.append(sum(terms) / len(terms) if terms else 0.0)
    return sum(per_sample) / len(per_sample)


# --- loss_cls ------------------------------------------------------------------

def test_bce_at_zero_logit():
    assert loss_cls(Tensor([[0.0]]), [[1]]).item() == pytest.approx(math.log(2), abs=1e-15)
    assert loss_cls(Tensor([[0.0]]), [[1]]).item() == pytest.approx(0.693147, abs=1e-6)


def test_bce_empty_selection_is_zero():
    loss = loss_cls(Tensor([[3.0, -1.0]]), [[-1, M_]])
    assert loss.item() == 0.0


def test_bce_large_logit_is_stable():
    loss = loss_cls(Tensor([[20.0]]), [[1]]).item()
    assert 0 < loss < 1e-8
    assert loss == pytest.approx(math.log1p(math.exp(-20.0)), rel=1e-12)
    assert loss_cls(Tensor([[800.0, -800.0]]), [[1, 0]]).item() == 0.0


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 2**31))
def test_bce_matches_scalar_oracle(b, q, seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(0, 4, (b, q))
    targets = rng.choice([1, 0, -1, M_], size=(b, q))
    got = loss_cls(Tensor(logits), targets).item()
    assert abs(got - bce_oracle(logits.tolist(), targets.tolist())) <= 1e-12


def test_unmentioned_logits_do_not_affect_loss(rng):
    logits = rng.standard_normal((3, 5))
    targets = np.array([[1, M_, 0, -1, 1], [M_, M_, 0, 1, -1], [0, 1, M_, M_, M_]])
    base = loss_cls(Tensor(logits), targets).item()
    bumped = logits.copy()
    bumped[targets == M_] += rng.normal(0, 10, (targets == M_).sum())
    bumped[targets == -1] -= 7.0
    assert loss_cls(Tensor(bumped), targets).item() == base


# --- loss_loc ------------------------------------------------------------------

def test_loc_hand_example():
    preds = Tensor([[[1.0, 0.0]]])
    bank = np.array([[1.0, 0.0], [0.0, 1.0]])
    kw = dict(negatives=np.array([[[1]]]))
    lit = loss_loc(preds, [[0]], bank, variant="literal", **kw).item()
    log = loss_loc(preds, [[0]], bank, variant="log", **kw).item()
    assert lit == pytest.approx(-math.e / (math.e + 1), abs=1e-15)
    assert log == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-15)
    assert (round(lit, 6), round(log, 6)) == (-0.731059, 0.313262)


@pytest.mark.parametrize("m", [1, 3, 7])
def test_loc_identical_embeddings_give_log_m_plus_one(m, rng):
    bank = np.tile(rng.standard_normal(6), (m + 2, 1))
    preds = Tensor(rng.standard_normal((1, 1, 6)))
    loss = loss_loc(preds, [[0]], bank, m=m, rng=rng).item()
    assert loss == pytest.approx(math.log(m + 1), abs=1e-12)


def test_loc_empty_selection_is_zero(rng):
    preds = Tensor(rng.standard_normal((2, 3, 4)))
    assert loss_loc(preds, np.full((2, 3), NO_POSITION), rng.standard_normal((5, 4)), m=2, rng=rng).item() == 0.0


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.sampled_from(["log", "literal"]),
       st.integers(0, 2**31))
def test_loc_matches_scalar_oracle(b, q, m, variant, seed):
    rng = np.random.default_rng(seed)
    n_pos, dt = m + 3, 5
    bank = rng.standard_normal((n_pos, dt))
    preds = rng.standard_normal((b, q, dt))
    targets = np.where(rng.random((b, q)) < 0.6, rng.integers(0, n_pos, (b, q)), -1)
    negs = keyed_negatives(targets, n_pos, m, seed % 1000, 0, range(b))
    got = loss_loc(Tensor(preds), targets, bank, negatives=negs, variant=variant).item()
    want = loc_oracle(preds.tolist(), targets.tolist(), bank.tolist(), negs.tolist(), variant)
    assert abs(got - want) <= 1e-12


def test_loc_rejects_too_many_negatives(rng):
    with pytest.raises(ValueError):
        loss_loc(Tensor(rng.standard_normal((1, 1, 3))), [[0]], rng.standard_normal((3, 3)), m=3, rng=rng)
    with pytest.raises(ValueError):
        TrainConfig(negatives=6).validate(num_positions=6)


# --- negatives -------------------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(st.integers(2, 60), st.data())
def test_negatives_are_distinct_and_exclude_positive(n_pos, data):
    positive = data.draw(st.integers(0, n_pos - 1))
    m = data.draw(st.integers(1, n_pos - 1))
    rng = np.random.default_rng(data.draw(st.integers(0, 1000)))
    negs = sample_negatives(positive, n_pos, m, rng)
    assert len(negs) == m and len(set(negs.tolist())) == m
    assert positive not in negs and negs.min() >= 0 and negs.max() < n_pos


def test_keyed_negatives_ignore_batch_composition():
    targets = np.array([[2, -1, 0], [1, 3, -1], [-1, -1, 4]])
    full = keyed_negatives(targets, 6, 3, seed=9, epoch=2, sample_ids=[10, 11, 12])
    part = keyed_negatives(targets[[2, 0]], 6, 3, seed=9, epoch=2, sample_ids=[12, 10])
    assert np.array_equal(part, full[[2, 0]])
    assert np.all(full[targets < 0] == -1)
    other = keyed_negatives(targets, 6, 3, seed=9, epoch=3, sample_ids=[10, 11, 12])
    assert not np.array_equal(other, full)


# --- targets ---------------------------------------------------------------------

def test_supervision_targets(kb):
    mass, cyst, nodule = (kb.entity_id(n) for n in ("mass", "cyst", "nodule"))
    granuloma = kb.entity_id("granuloma")
    left_apex, unspec = kb.position_id("left apex"), kb.unspecified_id
    trips = [Triplet(mass, left_apex, ExistLabel.PRESENT), Triplet(cyst, unspec, ExistLabel.PRESENT),
             Triplet(nodule, left_apex, ExistLabel.ABSENT), Triplet(granuloma, left_apex, ExistLabel.PRESENT)]
    exist, pos = supervision_targets(trips, kb)
    assert exist.shape == (kb.num_queries,)
    row = kb.query_index
    assert (exist[row(mass)], pos[row(mass)]) == (1, left_apex)
    assert (exist[row(cyst)], pos[row(cyst)]) == (1, NO_POSITION)
    assert (exist[row(nodule)], pos[row(nodule)]) == (0, NO_POSITION)
    assert exist[row(kb.entity_id("opacity"))] == UNMENTIONED


# --- total loss and gradients ----------------------------------------------------

def test_total_loss_arithmetic():
    assert total_loss(Tensor(0.7), Tensor(0.3)).item() == pytest.approx(1.0, abs=1e-15)
    assert total_loss(Tensor(0.7), Tensor(0.3), alpha_loc=0.0).item() == pytest.approx(0.7, abs=1e-15)


@pytest.fixture(scope="module")
def tiny_model(kb):
    return Model(ModelConfig(conv_channels=(4, 8, 8), d=16, d_text=16, layers=1, heads=2, ffn=16), kb, seed=3)


@pytest.fixture(scope="module")
def batch(small_dataset, kb):
    return stack_targets(small_dataset[:6], kb)


def _losses(model, batch, negs):
    images, exist, position = batch
    out = model.forward(images)
    return loss_cls(out.exist_logits, exist), loss_loc(out.position_preds, position, model.position_bank,
                                                     negatives=negs)


def _negs(model, batch):
    return keyed_negatives(batch[2], model.kb.num_positions, 3, 0, 0, range(len(batch[2])))


def test_total_gradient_is_weighted_sum(tiny_model, batch):
    negs = _negs(tiny_model, batch)
    grads = []
    for a_loc, a_cls in ((1.0, 0.0), (0.0, 1.0), (0.4, 1.7)):
        for p in tiny_model.params.values():
            p.zero_grad()
        total_loss(*_losses(tiny_model, batch, negs), alpha_loc=a_loc, alpha_cls=a_cls).backward()
        grads.append({k: p.grad.copy() for k, p in tiny_model.params.items()})
    for k in grads[0]:
        assert np.allclose(grads[2][k], 0.4 * grads[0][k] + 1.7 * grads[1][k], atol=1e-12)
    w = tiny_model.params["fus.exist2.w"].data.copy()

    def f(x):
        params = dict(tiny_model.params, **{"fus.exist2.w": x})
        out = Model(tiny_model.cfg, tiny_model.kb, params=params).forward(batch[0])
        return total_loss(loss_cls(out.exist_logits, batch[1]),
                          loss_loc(out.position_preds, batch[2], tiny_model.position_bank, negatives=negs),
                          0.4, 1.7)
    assert finite_diff_check(f, w) < 1e-4


def test_alpha_zero_gives_position_head_no_gradient(tiny_model, batch):
    for p in tiny_model.params.values():
        p.zero_grad()
    total_loss(*_losses(tiny_model, batch, _negs(tiny_model, batch)), alpha_loc=0.0).backward()
    for k in ("fus.pos1.w", "fus.pos1.b", "fus.pos2.w", "fus.pos2.b"):
        assert not tiny_model.params[k].grad.any()
    assert tiny_model.params["fus.exist2.w"].grad.any()


def test_small_step_descends(kb, batch):
    model = Model(ModelConfig(conv_channels=(4, 8, 8), d=16, d_text=16, layers=1, heads=2, ffn=16), kb, seed=3)
    negs = _negs(model, batch)
    before = total_loss(*_losses(model, batch, negs))
    before.backward()
    opt = AdamW(model.params, lr=1e-4, weight_decay=0.0)
    opt.step()
    after = total_loss(*_losses(model, batch, negs))
    assert after.item() < before.item()


# --- optimizer and schedule -------------------------------------------------------

def test_adamw_first_step_matches_hand_computation():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([0.5, -0.25])
    AdamW({"p": p}, lr=0.1, weight_decay=0.01).step()
    # After bias correction the first step is lr * g / (|g| + eps).
    g = np.array([0.5, -0.25])
    expected = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01) - 0.1 * g / (np.abs(g) + 1e-8)
    assert np.allclose(p.data, expected, atol=1e-15)


def test_adamw_state_round_trip():
    p = Tensor(np.ones(3), requires_grad=True)
    opt = AdamW({"p": p})
    for g in ([1.0, 2.0, 3.0], [0.5, 0.0, -1.0]):
        p.grad = np.array(g)
        opt.step()
    twin = AdamW({"p": Tensor(np.ones(3), requires_grad=True)})
    twin.load_state(opt.state())
    assert twin.step_count == 2 and np.array_equal(twin.m["p"], opt.m["p"])


def test_warmup_schedule():
    cfg = TrainConfig(lr=1e-4, warmup_lr=1e-5, warmup_epochs=5)
    assert learning_rate(cfg, 0, 10) == 1e-5
    assert learning_rate(cfg, 25, 10) == pytest.approx(5.5e-5)
    assert learning_rate(cfg, 50, 10) == 1e-4 == learning_rate(cfg, 500, 10)
    assert learning_rate(TrainConfig(warmup_epochs=0), 0, 10) == TrainConfig().lr


@pytest.mark.parametrize("change", [dict(alpha_loc=-1), dict(negatives=0), dict(loc_variant="cube"),
                                    dict(epochs=0), dict(lr=0.0)])
def test_config_validation(change):
    with pytest.raises(ValueError):
        TrainConfig(**change).validate()


def test_epoch_record_line():
    assert EpochRecord(3, 0.5, 0.25, 0.75, 1.23456).line() == "3,0.5,0.25,0.75,1.235"


# --- loop ------------------------------------------------------------------------

def _run(kb, small_dataset, seed):
    model = Model(ModelConfig(conv_channels=(4, 8, 8), d=16, d_text=16, layers=1, heads=2, ffn=16), kb, seed=seed)
    images, exist, position = stack_targets(small_dataset[:20], kb)
    cfg = TrainConfig(epochs=2, batch_size=8, seed=seed, warmup_epochs=1)
    result = train(model, images, exist, position, cfg)
    return model, result


def test_training_is_deterministic(kb, small_dataset):
    a, ra = _run(kb, small_dataset, 4)
    b, rb = _run(kb, small_dataset, 4)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    assert [r.total for r in ra.history] == [r.total for r in rb.history]
    c, _ = _run(kb, small_dataset, 5)
    assert not np.array_equal(a.params["fus.exist2.w"].data, c.params["fus.exist2.w"].data)


def test_training_rejects_empty_set(kb):
    model = Model(ModelConfig(), kb)
    with pytest.raises(ValueError):
        train(model, np.zeros((0, 32, 32, 1)), np.zeros((0, 6)), np.zeros((0, 6)), TrainConfig())


def test_resuming_matches_one_run(kb, small_dataset):
    images, exist, position = stack_targets(small_dataset[:16], kb)
    cfg = TrainConfig(epochs=2, batch_size=8, warmup_epochs=1)
    make = lambda: Model(ModelConfig(conv_channels=(4, 8, 8), d=16, d_text=16, layers=1, heads=2, ffn=16), kb, seed=1)
    whole = make()
    train(whole, images, exist, position, cfg)
    half = make()
    first = train(half, images, exist, position, TrainConfig(**{**cfg.to_dict(), "epochs": 1}))
    train(half, images, exist, position, cfg, optimizer=first.optimizer, start_epoch=1)
    assert all(np.array_equal(whole.params[k].data, half.params[k].data) for k in whole.params)
