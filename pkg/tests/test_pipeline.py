import numpy as np
import pytest

from covft_lab import autodiff as ad
from covft_lab.autodiff import Tensor
from covft_lab.encoder import EncoderConfig
from covft_lab.errors import ConfigError, InputError
from covft_lab.pipeline import (
    Batch,
    DecoderConfig,
    ModelConfig,
    decode,
    encode_batch,
    evaluate,
    forward,
    generate,
    init_model,
    instruction_loss,
    project,
)
from covft_lab.taskgen import TASK_KINDS, Vocab, build_dataset, pretrain_pairs
from covft_lab.vft import Strategy, TrainConfig, prepare, train, trainable_mask, set_trainable
from covft_lab.verify import check_gradients


@pytest.fixture(scope="module")
def data():
    return build_dataset(TASK_KINDS, 150, seed=0)


@pytest.fixture(scope="module")
def model():
    return init_model(ModelConfig(), 0)


def test_project_zero_weights_gives_bias(model):
    m = model.copy()
    for k in ("projector.fc1.weight", "projector.fc2.weight"):
        m.params[k].data[:] = 0.0
    beta = np.arange(48.0)
    m.params["projector.fc2.bias"].data = beta
    out = project(m.params, Tensor(np.random.default_rng(0).normal(size=(2, 16, 32))))
    np.testing.assert_array_equal(out.data, np.broadcast_to(beta, (2, 16, 48)))


def test_project_identity_layers():
    cfg = ModelConfig(decoder=DecoderConfig(dim=32))
    m = init_model(cfg, 0)
    for k in ("fc1", "fc2"):
        m.params[f"projector.{k}.weight"].data = np.eye(32)
        m.params[f"projector.{k}.bias"].data[:] = 0.0
    z = np.random.default_rng(1).normal(size=(1, 4, 32))
    from scipy.special import erf

    np.testing.assert_allclose(project(m.params, Tensor(z)).data, z * 0.5 * (1 + erf(z / np.sqrt(2))), atol=1e-12)


def test_project_width_mismatch(model):
    with pytest.raises(InputError):
        project(model.params, Tensor(np.zeros((1, 4, 31))))


def test_project_grad_check(model):
    m = model.copy()
    ps = {k: v for k, v in m.params.items() if k.startswith("projector.")}
    for t in ps.values():
        t.requires_grad = True
    rng = np.random.default_rng(2)
    z = Tensor(rng.normal(size=(2, 3, 32)))
    r = rng.normal(size=(2, 3, 48))
    assert ad.finite_diff_check(lambda: ad.sum(project(m.params, z) * r), ps) < 1e-5


def test_untrained_loss_near_uniform(model, data):
    for s in data[:15]:
        loss = float(instruction_loss(model, Batch.from_samples([s])).data)
        expected = (len(s.answer) + 1) * np.log(Vocab.SIZE)  # answer tokens plus <eos>
        assert abs(loss - expected) / expected < 0.2, s.task_kind


def test_saturated_logits_give_zero_loss(model, data):
    m = model.copy()
    batch = Batch.from_samples(data[:4])
    logits, _ = forward(m, batch)
    onehot = np.zeros(logits.shape)
    np.put_along_axis(onehot, batch.targets[..., None], 1e3, axis=-1)
    loss = ad.cross_entropy(Tensor(onehot), batch.targets, batch.mask, scale=0.25)
    assert float(loss.data) < 1e-12


def test_sequence_overflow_is_config_error():
    with pytest.raises(ConfigError):
        ModelConfig(decoder=DecoderConfig(max_len=10))
    m = init_model(ModelConfig(), 0)
    with pytest.raises(ConfigError):
        decode(m, Tensor(np.zeros((1, 16, 48))), np.zeros((1, 4), np.int64), np.zeros((1, 40), np.int64))


def test_empty_answer_rejected(data):
    from dataclasses import replace

    with pytest.raises(InputError):
        Batch.from_samples([replace(data[0], answer=[])])


def test_loss_masks_instruction_positions(model, data):
    # instruction logits are never scored: only answer-part logits leave decode()
    batch = Batch.from_samples(data[:3])
    logits, _ = forward(model, batch)
    assert logits.shape[1] == batch.inputs.shape[1]
    shorter = Batch.from_samples([data[0]])
    base = float(instruction_loss(model, shorter).data)
    padded = Batch.from_samples([data[0], data[1]])
    both = float(instruction_loss(model, padded).data) * 2
    alone = float(instruction_loss(model, Batch.from_samples([data[1]])).data)
    assert abs(both - base - alone) < 1e-9


def test_causality_suffix_perturbation(model, data):
    batch = Batch.from_samples([data[1]])  # multi-token caption
    logits, _ = forward(model, batch)
    changed = Batch.from_samples([data[1]])
    changed.inputs[0, -1] = (changed.inputs[0, -1] + 7) % Vocab.SIZE
    logits2, _ = forward(model, changed)
    np.testing.assert_array_equal(logits.data[:, :-1], logits2.data[:, :-1])
    assert not np.array_equal(logits.data[:, -1], logits2.data[:, -1])


def test_pretrain_stage_only_projector_gets_gradient(model, data):
    m = model.copy()
    mask = trainable_mask(m, Strategy("full_ft"), "pretrain")
    set_trainable(m, mask)
    instruction_loss(m, Batch.from_samples(data[:2])).backward()
    for k, t in m.params.items():
        if k.startswith("projector."):
            assert t.grad is not None and np.abs(t.grad).max() > 0
        else:
            assert t.grad is None or not np.any(t.grad)


def test_encoder_independent_of_instruction_without_context(model, data):
    a = Batch.from_samples([data[0]])
    b = Batch.from_samples([data[0]])
    b.instructions = np.array([data[5].instruction])
    np.testing.assert_array_equal(encode_batch(model, a).features.data, encode_batch(model, b).features.data)


def test_end_to_end_gradient_check():
    ok, detail = check_gradients(seed=0)
    assert ok, detail


def test_generate_deterministic_and_in_vocab(model, data):
    imgs = np.stack([s.image for s in data[:6]])
    ins = np.array([s.instruction for s in data[:6]])
    a = generate(model, imgs, ins)
    assert a == generate(model, imgs, ins)
    assert all(0 <= t < Vocab.SIZE for seq in a for t in seq)
    assert all(len(seq) <= 7 for seq in a)


def test_overfit_single_sample_reproduces_answer(data):
    sample = data[1]
    m = prepare(init_model(ModelConfig(), 0), Strategy("full_ft"))
    cfg = TrainConfig(pretrain_steps=0, instruct_steps=200, batch_size=1, lr_instruct=3e-3, log_every=50)
    rec = train(m, Strategy("full_ft"), cfg, instruct_data=[sample], stages=["instruct"])
    assert rec.losses()[-1] < rec.losses()[0]
    assert generate(m, sample.image, sample.instruction) == [list(sample.answer)]


def test_evaluate_all_correct(model, data, monkeypatch):
    import covft_lab.pipeline as pl

    answers = {s.image.tobytes() + bytes(s.instruction): list(s.answer) for s in data}
    monkeypatch.setattr(
        pl, "generate",
        lambda m, imgs, ins, sample_ids=None: [answers[im.tobytes() + bytes(list(q))] for im, q in zip(imgs, ins)],
    )
    acc = evaluate(model, data)
    assert set(acc) == set(TASK_KINDS) | {"macro"}
    assert all(v == 1.0 for v in acc.values())


def test_macro_is_unweighted_mean(model):
    data = build_dataset(["grounding", "existence"], 30, seed=1) + build_dataset(["grounding"], 90, seed=2)
    acc = evaluate(model, data)
    assert acc["macro"] == pytest.approx((acc["grounding"] + acc["existence"]) / 2, abs=1e-15)


def test_untrained_single_token_accuracy_near_chance(model):
    data = build_dataset(["existence"], 200, seed=3)
    acc = evaluate(model, data)["existence"]
    # yes/no answer space: no better than a coin flip beyond the 3-sigma binomial band
    assert acc <= 0.5 + 3 * np.sqrt(0.25 / 200)


def test_evaluate_empty_rejected(model):
    with pytest.raises(InputError):
        evaluate(model, [])


def test_pretrain_pairs_feed_pipeline(model):
    pairs = pretrain_pairs(4, seed=0)
    assert np.isfinite(float(instruction_loss(model, Batch.from_samples(pairs)).data))


def test_covft_model_forward_shapes():
    m = init_model(ModelConfig(EncoderConfig(experts=4)), 0)
    batch = Batch.from_samples(build_dataset(TASK_KINDS, 15, seed=0)[:3])
    logits, enc = forward(m, batch)
    assert logits.shape == (3, batch.inputs.shape[1], Vocab.SIZE)
    assert len(enc.routing_trace) == 4
