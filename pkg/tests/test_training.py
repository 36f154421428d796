import math

import numpy as np
import pytest

from bimcq.data import SynthConfig, generate_dataset
from bimcq.errors import IntegrityError, TrainingError
from bimcq.mcq import McqConfig
from bimcq.model import BiMcqModel, ModelConfig
from bimcq.prompts import PromptSpec, Tokenizer
from bimcq.tensor import Tensor, cross_entropy, gradcheck
from bimcq.training import (
    Checkpoint, Objective, PromptCache, TrainConfig, bimcq_batch_loss, bimcq_loss, infonce_from_globals,
    infonce_from_targets, infonce_prompts, load_checkpoint, save_checkpoint, train,
)

from grad_cases import tiny_model


def small_dataset(n=96, seed=0, **kw):
    return generate_dataset(SynthConfig(n_samples=n, **kw), seed=seed)


def small_cfg(**kw):
    base = dict(epochs=2, batch_size=16, learning_rate=1e-2, model=ModelConfig(d=8, heads=2))
    base.update(kw)
    return TrainConfig(**base)


def test_bimcq_loss_uniform():
    loss = bimcq_loss([(Tensor(np.zeros(4)), 1)], [(Tensor(np.zeros(4)), 3)])
    assert loss.item() == pytest.approx(2 * math.log(4), abs=1e-12)


def test_bimcq_loss_empty_t2i_is_i2t(rng):
    items = [(Tensor(rng.normal(size=4)), int(rng.integers(4))) for _ in range(3)]
    total = cross_entropy(*items[0]) + cross_entropy(*items[1]) + cross_entropy(*items[2])
    assert bimcq_loss(items, []).item() == (total * (1.0 / 3)).item()


def test_bimcq_loss_matches_hand_composition(rng):
    i2t = [(Tensor(rng.normal(size=4)), int(rng.integers(4))) for _ in range(5)]
    t2i = [(Tensor(rng.normal(size=m)), int(rng.integers(m))) for m in (2, 3, 5)]

    def ce(x, t):
        return -(x[t] - x.max() - math.log(np.exp(x - x.max()).sum()))

    expected = np.mean([ce(x.data, t) for x, t in i2t]) + np.mean([ce(x.data, t) for x, t in t2i])
    assert abs(bimcq_loss(i2t, t2i).item() - expected) < 1e-12


def test_bimcq_loss_index_error():
    with pytest.raises(IndexError):
        bimcq_loss([(Tensor(np.zeros(2)), 2)], [])


def test_infonce_closed_form():
    img = Tensor(np.eye(2))
    txt = Tensor(np.eye(2))
    expected = -math.log(math.e / (math.e + 1))
    assert infonce_from_globals(img, txt, [0, 1], 1.0).item() == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.3133, abs=5e-5)


def test_infonce_indistinguishable_is_ln_batch():
    b = 6
    x = Tensor(np.ones((b, 4)))
    assert infonce_from_globals(x, x, np.arange(b), 0.07).item() == pytest.approx(math.log(b), abs=1e-12)


def test_infonce_scale_invariance(rng):
    img, txt = rng.normal(size=(5, 8)), rng.normal(size=(5, 8))
    base = infonce_from_globals(Tensor(img), Tensor(txt), np.arange(5), 0.07).item()
    scaled = infonce_from_globals(Tensor(5 * img), Tensor(txt * rng.uniform(0.1, 9, size=(5, 1))), np.arange(5), 0.07).item()
    assert scaled == pytest.approx(base, rel=1e-13)


def test_infonce_multi_positive_averages_targets(rng):
    img, txt = rng.normal(size=(2, 4)), rng.normal(size=(3, 4))
    pos = np.array([[1, 1, 0], [0, 0, 1]], dtype=bool)
    got = infonce_from_targets(Tensor(img), Tensor(txt), pos, 0.5).item()
    zi = img / np.linalg.norm(img, axis=1, keepdims=True)
    zt = txt / np.linalg.norm(txt, axis=1, keepdims=True)
    s = zi @ zt.T / 0.5
    row = s - np.log(np.exp(s).sum(axis=1, keepdims=True))
    col = s - np.log(np.exp(s).sum(axis=0, keepdims=True))
    i2t = -(0.5 * (row[0, 0] + row[0, 1]) + row[1, 2]) / 2
    t2i = -(col[0, 0] + col[0, 1] + col[1, 2]) / 3
    assert got == pytest.approx((i2t + t2i) / 2, abs=1e-12)


def test_infonce_needs_two_pairs():
    with pytest.raises(ValueError):
        infonce_from_globals(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 3))), [0], 0.07)


@pytest.mark.parametrize("style", ["per_disease", "joint"])
def test_infonce_prompt_construction(style):
    labels = np.array([[1, 0, 1], [0, 0, 0]], dtype=bool)
    owners, specs = infonce_prompts(labels, Objective.INFONCE_POS_ONLY, style)
    assert set(owners) == {0}
    assert all(s.polarity_class.value == "Affirmative" for s in specs)
    owners, specs = infonce_prompts(labels, Objective.INFONCE_POS_NEG, style)
    assert set(owners) == {0, 1}
    neg = [s for s in specs if s.negated]
    assert neg and all(not s.affirmed for s in neg)
    if style == "joint":
        assert PromptSpec([0, 2]) in specs and PromptSpec(negated=[0, 1, 2]) in specs


def test_separated_heads_get_no_cross_gradient(rng):
    model, tok = tiny_model(3, "Separated")
    images = model.encode_images(rng.normal(size=(2, 4, 5)))
    texts = model.encode_texts([tok.encode(PromptSpec([0])), tok.encode(PromptSpec(negated=[0]))])
    cross_entropy(model.i2t_pairs(images, texts, [0, 0], [0, 1]), 0).backward()
    assert all(p.grad is None or not np.any(p.grad) for p in model.t2i_head.named_parameters().values())
    assert any(p.grad is not None and np.any(p.grad) for p in model.i2t_head.named_parameters().values())
    model, tok = tiny_model(3, "Separated")
    images = model.encode_images(rng.normal(size=(2, 4, 5)))
    texts = model.encode_texts([tok.encode(PromptSpec([0]))])
    cross_entropy(model.t2i_pairs(texts, images, [0, 0], [0, 1]), 1).backward()
    assert all(p.grad is None or not np.any(p.grad) for p in model.i2t_head.named_parameters().values())


def test_full_batch_loss_gradcheck():
    model, tok = tiny_model(5)
    labels = np.array([[1, 0, 1], [0, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=bool)
    patches = np.random.default_rng(0).uniform(-2, 2, size=(4, 4, 5))
    cache = PromptCache(tok)
    mcq = McqConfig(subset_size=2, max_candidates=4, t2i_cap_factor=1)

    def loss():
        return bimcq_batch_loss(model, cache, patches, labels, mcq, np.random.default_rng(9))

    assert loss().item() >= 0
    errs = gradcheck(loss, model.trainable_parameters())
    assert max(errs) <= 1e-4


def test_zero_epochs_is_initialization():
    ds = small_dataset()
    cfg = small_cfg(epochs=0)
    ckpt = train(cfg, ds)
    init = BiMcqModel(cfg.model, ds.patches.shape[2], len(Tokenizer(ds.vocab)), cfg.seed).state_dict()
    assert all(ckpt.params[k].tobytes() == init[k].tobytes() for k in init)
    assert ckpt.loss_history == []


@pytest.mark.parametrize("objective", list(Objective))
def test_training_is_bitwise_deterministic(tmp_path, objective):
    ds = small_dataset()
    a = save_checkpoint(train(small_cfg(objective=objective), ds), tmp_path / "a.ckpt")
    b = save_checkpoint(train(small_cfg(objective=objective), ds), tmp_path / "b.ckpt")
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_round_trip(tmp_path):
    ckpt = train(small_cfg(), small_dataset())
    p1 = save_checkpoint(ckpt, tmp_path / "m.ckpt")
    back = load_checkpoint(p1)
    p2 = save_checkpoint(back, tmp_path / "m2.ckpt")
    assert p1.read_bytes() == p2.read_bytes()
    assert back.config == ckpt.config
    assert back.loss_history == ckpt.loss_history


def test_checkpoint_integrity_errors(tmp_path):
    path = save_checkpoint(train(small_cfg(epochs=1), small_dataset()), tmp_path / "m.ckpt")
    raw = path.read_bytes()
    for bad in (raw[:-1], raw[: len(raw) // 2], raw[:5]):
        path.write_bytes(bad)
        with pytest.raises(IntegrityError):
            load_checkpoint(path)
    flipped = bytearray(raw)
    flipped[len(raw) // 2] ^= 0xFF
    path.write_bytes(bytes(flipped))
    with pytest.raises(IntegrityError):
        load_checkpoint(path)
    wrong_version = bytearray(raw)
    wrong_version[8] = 9
    path.write_bytes(bytes(wrong_version))
    with pytest.raises(IntegrityError, match="version"):
        load_checkpoint(path)


def test_non_finite_input_aborts_with_location():
    ds = small_dataset()
    ds.patches[40, 0, 0] = np.nan
    with pytest.raises(TrainingError, match=r"epoch 0, batch \d+"):
        train(small_cfg(), ds)


def test_config_validation_names_fields():
    from bimcq.errors import ConfigError
    for kw, field in [({"batch_size": 1}, "train.batch_size"), ({"temperature": 0.0}, "train.temperature"),
                      ({"mcq": McqConfig(max_candidates=9)}, "train.mcq.max_candidates")]:
        with pytest.raises(ConfigError) as info:
            small_cfg(**kw).validate(4)
        assert info.value.field == field


def test_train_config_dict_round_trip():
    cfg = small_cfg(objective="InfoNcePosNeg")
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.slow
def test_bimcq_loss_descends_on_default_setup():
    from bimcq.config import load_run_config
    from bimcq.data import split
    run = load_run_config()
    for seed in range(3):
        full = generate_dataset(run.synth, seed)
        tr, _ = split(len(full), run.split, seed)
        cfg = run.train
        cfg.epochs, cfg.seed = 5, seed
        history = train(cfg, full.subset(tr)).loss_history
        assert history[-1] < history[0]
